"""Dice and balanced focal losses plus the layer-summed training objective.

Both losses consume the abnormal-channel probability map against the binary
ground-truth map.  The focal term is the standard balanced focal
cross-entropy (the negative class carries a (1-alpha) weight and its own
modulating factor); dice uses global sums.  The total objective is the plain
unweighted sum of focal + dice over the selected layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

_PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters.

    ``focal_alpha``/``focal_gamma`` default to the usual 0.25/2.0 from the
    focal-loss literature; no source pins them for this system, so treat
    them as tunables.
    """

    dice_epsilon: float = 1e-6
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.dice_epsilon <= 0:
            raise ValueError("dice_epsilon must be positive")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if not 0.0 < self.focal_alpha <= 1.0:
            raise ValueError("focal_alpha must be in (0, 1]")


def _flat(pred, gt) -> tuple[torch.Tensor, torch.Tensor]:
    p = pred if torch.is_tensor(pred) else torch.as_tensor(pred)
    g = gt if torch.is_tensor(gt) else torch.as_tensor(gt)
    g = g.to(p.dtype)
    if p.numel() != g.numel():
        raise ValueError(f"pred has {p.numel()} elements but gt has {g.numel()}")
    return p.reshape(-1), g.reshape(-1)


def dice_loss(pred, gt, epsilon: float = 1e-6) -> torch.Tensor:
    """1 - 2*sum(p*g) / (sum(p) + sum(g) + eps)."""
    p, g = _flat(pred, gt)
    overlap = 2.0 * (p * g).sum()
    return 1.0 - overlap / (p.sum() + g.sum() + epsilon)


def focal_loss(pred, gt, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Balanced focal cross-entropy, mean over pixels.

    Probabilities are clamped to [1e-7, 1 - 1e-7] so the loss stays finite
    for saturated predictions.
    """
    p, g = _flat(pred, gt)
    p = p.clamp(_PROB_FLOOR, 1.0 - _PROB_FLOOR)
    pos = alpha * (1.0 - p) ** gamma * g * torch.log(p)
    neg = (1.0 - alpha) * p ** gamma * (1.0 - g) * torch.log(1.0 - p)
    return -(pos + neg).mean()


def total_loss(per_layer_maps, gt_map, config: LossConfig | None = None) -> torch.Tensor:
    """Sum of focal + dice over the per-layer abnormal-probability maps."""
    cfg = config or LossConfig()
    if not per_layer_maps:
        raise ValueError("no score maps given")
    g = gt_map if torch.is_tensor(gt_map) else torch.as_tensor(gt_map)
    total = None
    for m in per_layer_maps:
        if m.shape != g.shape:
            raise ValueError(
                f"score map {tuple(m.shape)} does not match gt {tuple(g.shape)}"
            )
        term = focal_loss(m, g, cfg.focal_alpha, cfg.focal_gamma) + dice_loss(
            m, g, cfg.dice_epsilon
        )
        total = term if total is None else total + term
    return total
