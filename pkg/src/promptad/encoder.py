"""Frozen vision/text encoders behind a uniform interface.

The desk-scale implementation is a seeded synthetic encoder: every weight is
drawn from a single ``torch.Generator`` in a documented order, so two
constructions from the same spec are functionally identical and independent
re-implementations can replay the exact matrix pipeline.

Weight generation order (one generator, seeded with ``spec.seed``):

1. token embedding table      ``randn(VOCAB_SIZE, C_T) * 0.02``
2. per text layer l:          ``W_l  randn(C_T, C_T) / sqrt(C_T)``
                              ``b_l  randn(C_T) * 0.01``
                              ``M_l  randn(C_T, C_T) / sqrt(C_T)``   (sequence-mean mixing)
3. class-token seed           ``randn(3 * patch_size**2)``
4. per vision layer i=1..L:   ``W_i  randn(d_{i-1}, d_i) / sqrt(d_{i-1})``
                              ``b_i  randn(d_i) * 0.01``
   with ``d_0 = 3 * patch_size**2`` and ``d_i = vision_dims[i-1]``.
5. global projection          ``randn(d_L, C_T) / sqrt(d_L)``        (image-level embedding)

Vision path: images are cut into non-overlapping ``patch_size`` squares
(row-major over the grid, each patch flattened row-major as (p, p, 3)), a
class row is prepended as ``class_seed + mean(patch rows)``, and the
(1 + H*W) rows run through the per-layer affine+tanh chain.  The text path is
an embedding lookup (with soft-slot overrides) followed by per-layer
``tanh(X @ W_l + b_l + mean(X) @ M_l)`` blocks; the mean term is what lets the
pooled end-of-text position see the whole prompt.  No causal mask is applied;
the interface only promises an EOT-pooled unit vector.

Real pretrained weights plug in through :func:`register_encoder_adapter` /
:func:`load_encoder`; the core never bundles weight files.  An adapter for a
causal text encoder must document how inserted per-layer tokens interact with
its attention mask.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import torch

VOCAB_SIZE = 2048
PAD_ID = 0
EOT_ID = 1
SLOT_ID = 2
_RESERVED_IDS = 8

_WORD_RE = re.compile(r"[a-z0-9]+")


def word_token_id(word: str) -> int:
    """Stable hash of a lowercase word into the non-reserved id range."""
    digest = hashlib.sha1(word.encode("utf-8")).digest()
    value = int.from_bytes(digest[:8], "little")
    return _RESERVED_IDS + value % (VOCAB_SIZE - _RESERVED_IDS)


def tokenize(text: str) -> list[int]:
    """Lowercase word tokenizer; underscores and punctuation split words."""
    return [word_token_id(w) for w in _WORD_RE.findall(text.lower())]


@dataclass(frozen=True)
class EncoderSpec:
    """Static description of an encoder pair (vision + text).

    ``selected_layers`` are 1-based indices into the vision chain;
    ``vision_dims`` lists the output width of every vision layer.
    """

    image_size: int
    patch_size: int
    num_vision_layers: int
    selected_layers: tuple[int, ...]
    vision_dims: tuple[int, ...]
    text_dim: int
    text_seq_len: int
    num_text_layers: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "selected_layers", tuple(self.selected_layers))
        object.__setattr__(self, "vision_dims", tuple(self.vision_dims))
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ValueError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if len(self.vision_dims) != self.num_vision_layers:
            raise ValueError("vision_dims must list one width per vision layer")
        if any(d <= 0 for d in self.vision_dims) or self.text_dim <= 0:
            raise ValueError("all feature dims must be positive")
        if self.text_seq_len <= 0 or self.num_text_layers <= 0:
            raise ValueError("text_seq_len and num_text_layers must be positive")
        if not self.selected_layers:
            raise ValueError("selected_layers must be nonempty")
        if any(
            b <= a for a, b in zip(self.selected_layers, self.selected_layers[1:])
        ):
            raise ValueError("selected_layers must be strictly increasing")
        if self.selected_layers[0] < 1 or self.selected_layers[-1] > self.num_vision_layers:
            raise ValueError("selected_layers out of range")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def selected_dims(self) -> tuple[int, ...]:
        return tuple(self.vision_dims[i - 1] for i in self.selected_layers)


class LayerFeatures(NamedTuple):
    layer: int
    class_token: torch.Tensor  # [C_i]
    patch_grid: torch.Tensor   # [H*W, C_i]


@dataclass
class PatchFeatureStack:
    """Frozen per-selected-layer vision features for one image."""

    layers: tuple[LayerFeatures, ...]
    grid_hw: tuple[int, int]

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


@dataclass
class TokenSequence:
    """Token ids plus learnable-embedding overrides at the given positions.

    ``token_ids`` is the meaningful (unpadded) sequence ending at the EOT
    token; padding to the encoder's ``text_seq_len`` happens inside
    ``encode_text``.
    """

    token_ids: list[int]
    soft_slots: dict[int, torch.Tensor] = field(default_factory=dict)
    eot_position: int = -1

    def __post_init__(self):
        if self.eot_position < 0:
            self.eot_position = len(self.token_ids) - 1
        if not (0 <= self.eot_position < len(self.token_ids)):
            raise ValueError("eot_position outside the sequence")
        for pos in self.soft_slots:
            if not (0 <= pos < len(self.token_ids)):
                raise ValueError(f"soft slot position {pos} outside the sequence")


def plain_sequence(text: str) -> TokenSequence:
    """Tokenize a raw sentence and terminate it with the EOT token."""
    ids = tokenize(text) + [EOT_ID]
    return TokenSequence(token_ids=ids)


class SyntheticEncoder:
    """Deterministic frozen encoder pair generated from ``spec.seed``.

    All weights are plain tensors (never trained); repeated calls with equal
    inputs are bit-identical.  Gradients still flow *through* the text path
    into soft-slot vectors and deep tokens, which is all prompt tuning needs.
    """

    def __init__(self, spec: EncoderSpec, dtype: torch.dtype = torch.float32):
        self.spec = spec
        self.dtype = dtype
        gen = torch.Generator().manual_seed(spec.seed)

        def draw(*shape, scale=1.0):
            t = torch.randn(*shape, generator=gen, dtype=torch.float64) * scale
            return t.to(dtype)

        ct = spec.text_dim
        self.token_embedding = draw(VOCAB_SIZE, ct, scale=0.02)
        self.text_weights = []
        self.text_biases = []
        self.text_mixers = []
        for _ in range(spec.num_text_layers):
            self.text_weights.append(draw(ct, ct, scale=ct ** -0.5))
            self.text_biases.append(draw(ct, scale=0.01))
            self.text_mixers.append(draw(ct, ct, scale=ct ** -0.5))

        d0 = 3 * spec.patch_size ** 2
        self.class_seed = draw(d0)
        dims = (d0,) + spec.vision_dims
        self.vision_weights = []
        self.vision_biases = []
        for i in range(spec.num_vision_layers):
            self.vision_weights.append(draw(dims[i], dims[i + 1], scale=dims[i] ** -0.5))
            self.vision_biases.append(draw(dims[i + 1], scale=0.01))
        self.global_proj = draw(dims[-1], ct, scale=dims[-1] ** -0.5)

    # -- vision ---------------------------------------------------------

    def _patchify(self, image) -> torch.Tensor:
        s, p = self.spec.image_size, self.spec.patch_size
        img = torch.as_tensor(image, dtype=self.dtype)
        if img.shape != (s, s, 3):
            raise ValueError(f"expected image of shape ({s}, {s}, 3), got {tuple(img.shape)}")
        g = self.spec.grid_size
        rows = img.reshape(g, p, g, p, 3).permute(0, 2, 1, 3, 4).reshape(g * g, p * p * 3)
        return rows

    def _vision_chain(self, image) -> list[torch.Tensor]:
        """All-layer (1 + H*W) token matrices, index 0 = input to layer 1."""
        rows = self._patchify(image)
        cls0 = self.class_seed + rows.mean(dim=0)
        x = torch.cat([cls0.unsqueeze(0), rows], dim=0)
        outputs = []
        for w, b in zip(self.vision_weights, self.vision_biases):
            x = torch.tanh(x @ w + b)
            outputs.append(x)
        return outputs

    def encode_image(self, image) -> PatchFeatureStack:
        """Frozen patch features (class token + H*W grid) per selected layer."""
        with torch.no_grad():
            outputs = self._vision_chain(image)
        g = self.spec.grid_size
        layers = tuple(
            LayerFeatures(layer=i, class_token=outputs[i - 1][0], patch_grid=outputs[i - 1][1:])
            for i in self.spec.selected_layers
        )
        return PatchFeatureStack(layers=layers, grid_hw=(g, g))

    def encode_image_global(self, image) -> torch.Tensor:
        """Unit-norm image-level embedding in text space.

        Final-layer class token through the encoder's fixed image->text
        projection; this is the frozen similarity anchor class-name filtering
        compares text sentences against.
        """
        with torch.no_grad():
            cls = self._vision_chain(image)[-1][0]
            out = cls @ self.global_proj
            return out / out.norm()

    # -- text -----------------------------------------------------------

    def encode_text(
        self, seq: TokenSequence, deep_tokens: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """EOT-pooled unit-norm embedding of one token sequence.

        With ``deep_tokens`` (one vector per text layer) a slot is inserted
        immediately before the EOT position once, and every layer's input has
        its layer-specific token written into that slot — the previous
        layer's (transformed) token is discarded, so the sequence length
        stays constant.
        """
        nl = self.spec.text_seq_len
        ids = list(seq.token_ids)
        if len(ids) > nl:
            raise ValueError(f"sequence length {len(ids)} exceeds text_seq_len {nl}")
        if any(not (0 <= i < VOCAB_SIZE) for i in ids):
            raise ValueError("token id outside vocabulary")

        x = self.token_embedding[torch.tensor(ids, dtype=torch.long)]
        for pos, vec in seq.soft_slots.items():
            v = torch.as_tensor(vec, dtype=self.dtype) if not torch.is_tensor(vec) else vec
            if v.shape != (self.spec.text_dim,):
                raise ValueError("soft slot vector has wrong dimension")
            x = torch.cat([x[:pos], v.unsqueeze(0), x[pos + 1:]], dim=0)

        eot = seq.eot_position
        slot = None
        if deep_tokens is not None:
            deep_tokens = torch.as_tensor(deep_tokens, dtype=self.dtype) \
                if not torch.is_tensor(deep_tokens) else deep_tokens
            if deep_tokens.shape != (self.spec.num_text_layers, self.spec.text_dim):
                raise ValueError(
                    "deep_tokens must provide one vector per text layer "
                    f"({self.spec.num_text_layers} x {self.spec.text_dim})"
                )
            if len(ids) + 1 > nl:
                raise ValueError("no room before EOT for the deep prompt slot")
            x = torch.cat([x[:eot], x[eot:eot + 1], x[eot:]], dim=0)  # placeholder at eot
            slot, eot = eot, eot + 1

        if x.shape[0] < nl:
            pad = self.token_embedding[PAD_ID].unsqueeze(0).expand(nl - x.shape[0], -1)
            x = torch.cat([x, pad], dim=0)

        for layer in range(self.spec.num_text_layers):
            if slot is not None:
                x = torch.cat([x[:slot], deep_tokens[layer].unsqueeze(0), x[slot + 1:]], dim=0)
            w, b, m = self.text_weights[layer], self.text_biases[layer], self.text_mixers[layer]
            x = torch.tanh(x @ w + b + x.mean(dim=0) @ m)

        pooled = x[eot]
        return pooled / pooled.norm()

    def encode_sentence(self, text: str) -> torch.Tensor:
        """Vanilla frozen embedding of a raw sentence (no prompt tuning)."""
        return self.encode_text(plain_sequence(text), deep_tokens=None)


def make_synthetic_encoder(
    spec: EncoderSpec, dtype: torch.dtype = torch.float32
) -> SyntheticEncoder:
    return SyntheticEncoder(spec, dtype=dtype)


# -- adapter contract ----------------------------------------------------

_ADAPTERS: dict[str, Callable] = {}


def register_encoder_adapter(name: str, factory: Callable) -> None:
    """Register a named encoder factory: factory(spec, weights_path) -> encoder.

    The returned object must implement ``encode_image``, ``encode_text`` and
    ``encode_image_global`` with the synthetic encoder's signatures.
    """
    _ADAPTERS[name] = factory


def load_encoder(name: str, spec: EncoderSpec, weights_path: Optional[str] = None):
    if name not in _ADAPTERS:
        known = ", ".join(sorted(_ADAPTERS))
        raise KeyError(f"unknown encoder adapter '{name}' (registered: {known})")
    enc = _ADAPTERS[name](spec, weights_path)
    for method in ("encode_image", "encode_text", "encode_image_global"):
        if not callable(getattr(enc, method, None)):
            raise TypeError(f"adapter '{name}' returned an object without {method}()")
    return enc


register_encoder_adapter("synthetic", lambda spec, weights_path=None: SyntheticEncoder(spec))
