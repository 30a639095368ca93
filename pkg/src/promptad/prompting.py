"""Learnable prompt parameters and normal/abnormal prompt assembly.

All trainable state lives in :class:`PromptBank`: one normal and one abnormal
state token, two shared query tokens, one deep token per text-encoder layer,
and per-selected-vision-layer linear projectors (one producing the prompt
vector from pooled features, one projecting patch features into text space).
Everything else in the system is frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .encoder import EncoderSpec, LayerFeatures, TokenSequence, EOT_ID, SLOT_ID, tokenize


class PromptBank(nn.Module):
    """Container for every learnable parameter in the system.

    Initialization: state/query/deep tokens ~ N(0, 0.02²); projector weights
    ~ N(0, 1/C_i); projector biases zero.  Construction is deterministic
    given ``seed``.
    """

    def __init__(self, spec: EncoderSpec, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        ct = spec.text_dim

        def token(*shape):
            return nn.Parameter(
                (torch.randn(*shape, generator=gen, dtype=torch.float64) * 0.02).to(dtype)
            )

        self.spec = spec
        self.normal_token = token(ct)
        self.abnormal_token = token(ct)
        self.query_tokens = token(2, ct)
        self.deep_text_tokens = token(spec.num_text_layers, ct)

        self.prompt_projectors = nn.ModuleList()
        self.patch_projectors = nn.ModuleList()
        for ci in spec.selected_dims:
            for bucket in (self.prompt_projectors, self.patch_projectors):
                lin = nn.Linear(ci, ct, dtype=dtype)
                with torch.no_grad():
                    w = torch.randn(ct, ci, generator=gen, dtype=torch.float64) * ci ** -0.5
                    lin.weight.copy_(w.to(dtype))
                    lin.bias.zero_()
                bucket.append(lin)

    def parameter_arrays(self) -> dict:
        """Named parameter tensors in a stable order (checkpoint inventory)."""
        return dict(self.named_parameters())


@dataclass(frozen=True)
class PromptTemplate:
    """The shared two-state sentence template.

    Renders as "<state-slot> photo of a {state} {cls} object" where the
    leading word's embedding is overridden by the normal/abnormal state token
    and two query-token slots follow the last word.  The query-only form
    substitutes ``generic_class`` for the class word.
    """

    normal_state: str = "good"
    abnormal_state: str = "damaged"
    prefix: str = "a photo of a"
    suffix: str = "object"
    generic_class: str = "object"


def vision_prompt(features: LayerFeatures, projector: nn.Linear) -> torch.Tensor:
    """Pool one layer's tokens (class token included) and project to text space."""
    rows = torch.cat([features.class_token.unsqueeze(0), features.patch_grid], dim=0)
    if rows.shape[1] != projector.in_features:
        raise ValueError(
            f"layer width {rows.shape[1]} does not match projector input {projector.in_features}"
        )
    return projector(rows.mean(dim=0))


def augment_queries(query_tokens: torch.Tensor, prompt_vec: torch.Tensor) -> torch.Tensor:
    """Add a layer's vision prompt vector to both shared query tokens."""
    if query_tokens.shape[0] != 2 or query_tokens.shape[1] != prompt_vec.shape[0]:
        raise ValueError("expected query tokens [2, C_T] and prompt vector [C_T]")
    return query_tokens + prompt_vec.unsqueeze(0)


def assemble_prompt(
    template: PromptTemplate,
    class_word: str,
    bank: PromptBank,
    vision_token: torch.Tensor | None,
) -> tuple[TokenSequence, TokenSequence]:
    """Build the (normal, abnormal) token sequences for one prompt pair.

    ``vision_token`` is the [2, C_T] query pair to place in the query slots;
    pass ``None`` for the query-only form, which uses the raw query tokens
    and forces the class word to ``template.generic_class``.  Underscores in
    class names are rendered as spaces before tokenization.
    """
    if vision_token is None:
        queries = bank.query_tokens
        class_word = template.generic_class
    else:
        if vision_token.shape != bank.query_tokens.shape:
            raise ValueError("vision_token must match the query-token shape [2, C_T]")
        queries = vision_token
    if not class_word:
        raise ValueError("class word must be nonempty")
    class_word = class_word.replace("_", " ")

    def build(state_word: str, state_vec: torch.Tensor) -> TokenSequence:
        words = f"{template.prefix} {state_word} {class_word} {template.suffix}"
        ids = tokenize(words)
        slots = {0: state_vec}
        for row in range(2):
            slots[len(ids)] = queries[row]
            ids.append(SLOT_ID)
        ids.append(EOT_ID)
        if len(ids) + 1 > bank.spec.text_seq_len:  # +1: deep-token slot at encode time
            raise ValueError(
                f"assembled prompt ({len(ids)} tokens) exceeds text_seq_len "
                f"{bank.spec.text_seq_len}"
            )
        return TokenSequence(token_ids=ids, soft_slots=slots)

    return (
        build(template.normal_state, bank.normal_token),
        build(template.abnormal_state, bank.abnormal_token),
    )


def embed_prompt_pair(
    sequences: tuple[TokenSequence, TokenSequence], bank: PromptBank, encoder
) -> torch.Tensor:
    """Encode a sequence pair with deep text tokens -> unit-norm [2, C_T]."""
    normal, abnormal = sequences
    return torch.stack(
        [
            encoder.encode_text(normal, deep_tokens=bank.deep_text_tokens),
            encoder.encode_text(abnormal, deep_tokens=bank.deep_text_tokens),
        ],
        dim=0,
    )
