"""Score maps, branch fusion, and the dual-branch inference pipeline.

Per layer, projected patch features are compared against a (normal, abnormal)
text-embedding pair by cosine similarity; the two logit channels are
bilinearly upsampled and softmaxed per pixel, and the abnormal channel is the
layer's score map.  Layer maps from the vision-enhanced branch and the
query-only branch are blended by a weighted raw sum and Gaussian-smoothed
into the segmentation map; the image-level score is a confidence-weighted
mean over the highest-scoring pixels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .cnf import CnfConfig, apply_cnf
from .encoder import PatchFeatureStack
from .prompting import (
    PromptBank,
    PromptTemplate,
    assemble_prompt,
    augment_queries,
    embed_prompt_pair,
    vision_prompt,
)


@dataclass(frozen=True)
class ScoringConfig:
    """Fusion and image-scoring knobs.

    ``temperature`` scales cosine logits before the per-pixel softmax; raw
    cosines in [-1, 1] would give a near-uniform softmax.
    """

    alpha: float = 0.8
    sigma: float = 9.0
    n1: int = 500
    n2: int = 2500
    temperature: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.n1 >= self.n2:
            raise ValueError("n1 must be strictly less than n2")
        if self.n1 < 1:
            raise ValueError("n1 must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class AnomalyResult:
    """Fused segmentation map plus the image-level score and its weight."""

    s_seg: np.ndarray
    s_det: float
    w: float
    class_name: str = ""
    per_layer_maps: Optional[dict] = None


def project_patches(patch_grid: torch.Tensor, projector) -> torch.Tensor:
    """Row-wise projection of a class-token-free patch grid into text space."""
    if patch_grid.ndim != 2:
        raise ValueError("patch_grid must be [H*W, C_i]")
    if patch_grid.shape[1] != projector.in_features:
        raise ValueError(
            f"grid width {patch_grid.shape[1]} does not match projector input "
            f"{projector.in_features}"
        )
    return projector(patch_grid)


def score_map(
    projected: torch.Tensor,
    pair: torch.Tensor,
    target_hw: tuple[int, int],
    temperature: float,
) -> torch.Tensor:
    """Cosine logits -> upsample -> per-pixel two-way softmax, abnormal channel.

    ``projected`` is [H*W, C_T] over a square patch grid; ``pair`` is the
    unit-norm (normal, abnormal) embedding pair [2, C_T].  Returns a
    [target_h, target_w] map of abnormal-channel probabilities — strictly
    inside (0, 1) in exact arithmetic, though extreme logit gaps can round
    to the closed endpoints in floating point.
    """
    hw = projected.shape[0]
    g = math.isqrt(hw)
    if g * g != hw:
        raise ValueError(f"patch grid with {hw} rows is not square")
    th, tw = target_hw
    if th < g or tw < g:
        raise ValueError(f"target {target_hw} smaller than the {g}x{g} patch grid")
    norms = projected.norm(dim=1, keepdim=True).clamp_min(1e-12)
    logits = (projected / norms) @ pair.T * temperature       # [H*W, 2]
    maps = logits.T.reshape(1, 2, g, g)
    up = F.interpolate(maps, size=(th, tw), mode="bilinear", align_corners=False)
    return torch.softmax(up, dim=1)[0, 1]


def gaussian_smooth(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur; kernel radius ceil(4*sigma), reflect padding.

    sigma = 0 is the identity.  Computed in float64, returned in the input
    dtype.
    """
    a = np.asarray(arr)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return a.copy()
    radius = math.ceil(4.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    kernel /= kernel.sum()

    out = a.astype(np.float64)
    for axis in range(a.ndim):
        pad = [(radius, radius) if ax == axis else (0, 0) for ax in range(a.ndim)]
        padded = np.pad(out, pad, mode="symmetric")
        acc = np.zeros_like(out)
        for j in range(2 * radius + 1):
            sl = [slice(None)] * a.ndim
            sl[axis] = slice(j, j + a.shape[axis])
            acc += kernel[j] * padded[tuple(sl)]
        out = acc
    return out.astype(a.dtype)


def fuse_maps(s_v_list, s_q_list, config: ScoringConfig) -> np.ndarray:
    """Weighted raw layer sums of both branches, then Gaussian smoothing.

    No division by the layer count.  A branch whose weight is exactly zero
    (alpha 0 or 1) is skipped and its list may be empty.
    """
    def stack(maps, label):
        arrs = [np.asarray(m, dtype=np.float64) for m in maps]
        if not arrs:
            raise ValueError(f"{label} branch has no maps but nonzero weight")
        shape = arrs[0].shape
        if any(m.shape != shape for m in arrs):
            raise ValueError(f"{label} branch maps disagree on resolution")
        return np.sum(arrs, axis=0), shape

    total, shape = None, None
    if config.alpha != 0.0:
        sv, shape = stack(s_v_list, "vision-enhanced")
        total = config.alpha * sv
    if config.alpha != 1.0:
        sq, qshape = stack(s_q_list, "query-only")
        if shape is not None and qshape != shape:
            raise ValueError("branches disagree on resolution")
        contrib = (1.0 - config.alpha) * sq
        total = contrib if total is None else total + contrib
    if s_v_list and s_q_list and len(s_v_list) != len(s_q_list):
        raise ValueError("branches disagree on layer count")
    return gaussian_smooth(total, config.sigma)


def image_score(s_seg: np.ndarray, n1: int, n2: int) -> tuple[float, float]:
    """Confidence-weighted top-pixel mean.

    w = mean(exp(top n1)) / mean(exp(top n2)); score = w * mean(top n1).
    Both counts clamp to the pixel count (with a warning) on small maps; if
    they clamp equal, or every candidate pixel holds the same value, w is
    exactly 1.  The selected values are sorted before averaging, so the
    result depends only on the value multiset.
    """
    flat = np.asarray(s_seg, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("empty score map")
    if n1 < 1:
        raise ValueError("n1 must be positive")
    if n1 >= n2:
        raise ValueError("n1 must be strictly less than n2")
    n1e, n2e = min(n1, flat.size), min(n2, flat.size)
    if n2 > flat.size:
        warnings.warn(
            f"map has {flat.size} pixels < n2={n2}; clamping top-N counts",
            RuntimeWarning,
            stacklevel=2,
        )
    top2 = np.sort(np.partition(flat, flat.size - n2e)[flat.size - n2e:])[::-1]
    top1 = top2[:n1e]
    if top2[0] == top2[-1]:
        return float(top2[0]), 1.0
    w = 1.0 if n1e == n2e else float(np.mean(np.exp(top1)) / np.mean(np.exp(top2)))
    return w * float(np.mean(top1)), w


def vision_branch_maps(
    stack: PatchFeatureStack,
    class_word: str,
    bank: PromptBank,
    encoder,
    template: PromptTemplate,
    target_hw: tuple[int, int],
    temperature: float,
) -> list[torch.Tensor]:
    """Per-layer score maps of the vision-enhanced branch (differentiable)."""
    maps = []
    for idx, feats in enumerate(stack):
        prompt_vec = vision_prompt(feats, bank.prompt_projectors[idx])
        queries = augment_queries(bank.query_tokens, prompt_vec)
        pair = embed_prompt_pair(
            assemble_prompt(template, class_word, bank, queries), bank, encoder
        )
        projected = project_patches(feats.patch_grid, bank.patch_projectors[idx])
        maps.append(score_map(projected, pair, target_hw, temperature))
    return maps


def query_embedding_pair(bank: PromptBank, encoder, template: PromptTemplate) -> torch.Tensor:
    """The image- and class-independent query-only embedding pair [2, C_T]."""
    return embed_prompt_pair(
        assemble_prompt(template, template.generic_class, bank, None), bank, encoder
    )


class Pipeline:
    """Dual-branch inference over a frozen prompt-bank snapshot.

    The query-only embedding pair is computed once per pipeline (it does not
    depend on the image or class) and reused for every call.  Name filtering
    here is per image; batch-level per-class voting is an orchestration
    concern — resolve names up front and pass ``class_name_override``.
    """

    def __init__(
        self,
        bank: PromptBank,
        encoder,
        scoring: ScoringConfig | None = None,
        cnf: CnfConfig | None = None,
        template: PromptTemplate | None = None,
    ):
        self.bank = bank
        self.encoder = encoder
        self.scoring = scoring or ScoringConfig()
        self.cnf = cnf or CnfConfig()
        self.template = template or PromptTemplate(generic_class=self.cnf.generic_term)
        self._query_pair: Optional[torch.Tensor] = None

    @property
    def query_pair(self) -> torch.Tensor:
        if self._query_pair is None:
            with torch.no_grad():
                self._query_pair = query_embedding_pair(
                    self.bank, self.encoder, self.template
                ).detach()
        return self._query_pair

    def infer(
        self,
        image,
        class_name: str,
        keep_layer_maps: bool = False,
        class_name_override: Optional[str] = None,
    ) -> AnomalyResult:
        cfg = self.scoring
        spec = self.encoder.spec
        target = (spec.image_size, spec.image_size)
        with torch.no_grad():
            stack = self.encoder.encode_image(image)
            if class_name_override is not None:
                final_name = class_name_override
            else:
                final_name = apply_cnf(image, class_name, self.cnf, self.encoder).final
            s_v = []
            if cfg.alpha != 0.0:
                s_v = vision_branch_maps(
                    stack, final_name, self.bank, self.encoder,
                    self.template, target, cfg.temperature,
                )
            s_q = []
            if cfg.alpha != 1.0:
                qpair = self.query_pair
                for idx, feats in enumerate(stack):
                    projected = project_patches(feats.patch_grid, self.bank.patch_projectors[idx])
                    s_q.append(score_map(projected, qpair, target, cfg.temperature))

        s_v_np = [m.numpy() for m in s_v]
        s_q_np = [m.numpy() for m in s_q]
        s_seg = fuse_maps(s_v_np, s_q_np, cfg)
        s_det, w = image_score(s_seg, cfg.n1, cfg.n2)
        layer_maps = {"vision": s_v_np, "query": s_q_np} if keep_layer_maps else None
        return AnomalyResult(
            s_seg=s_seg, s_det=s_det, w=w, class_name=final_name, per_layer_maps=layer_maps
        )


def infer(
    image,
    class_name: str,
    bank: PromptBank,
    encoder,
    cnf_config: CnfConfig | None = None,
    scoring_config: ScoringConfig | None = None,
) -> AnomalyResult:
    """One-shot dual-branch inference; see :class:`Pipeline` for batch use."""
    return Pipeline(bank, encoder, scoring=scoring_config, cnf=cnf_config).infer(
        image, class_name
    )
