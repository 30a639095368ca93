"""Ranking metrics: pixel/image AUROC, image AP, and region-overlap AUPRO.

All metrics are rank-based and hand-rolled so tie handling is pinned down:

* ``roc_auc`` is the Mann-Whitney statistic — the probability that a random
  positive outscores a random negative, ties counted half.
* ``average_precision`` sums precision at each positive's rank, descending
  score order with ties broken by original index.
* ``aupro`` sweeps descending score thresholds, averages per-region overlap
  |P∩G_r|/|G_r| over 8-connected ground-truth regions, and integrates the
  (FPR, mean PRO) curve by trapezoid from 0 to ``fpr_limit``, normalized by
  the limit.  The threshold grid follows order-statistic quantiles of the
  observed scores, so the metric is invariant under strictly increasing
  score transforms.

Metrics that need both classes (or at least one positive / one region)
return ``None`` when the input is single-class.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their group mean."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> Optional[float]:
    """Area under the TPR-FPR curve; None if only one class is present."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _midranks(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> Optional[float]:
    """Step-wise area under the precision-recall curve; None with no positives."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.lexsort((np.arange(s.size), -s))  # descending score, index tie-break
    hits = y[order] == 1
    precision_at = np.cumsum(hits) / np.arange(1, s.size + 1)
    return float(precision_at[hits].sum() / n_pos)


def _threshold_grid(scores: np.ndarray, num_thresholds: int) -> np.ndarray:
    distinct = np.unique(scores)
    if distinct.size <= num_thresholds:
        return distinct[::-1]
    qs = np.linspace(0.0, 1.0, num_thresholds)
    return np.unique(np.quantile(scores, qs, method="lower"))[::-1]


def aupro(
    score_maps: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    fpr_limit: float = 0.3,
    num_thresholds: int = 200,
) -> Optional[float]:
    """Normalized area under the per-region-overlap curve up to ``fpr_limit``.

    ``None`` when no mask contains an anomalous region.  The curve is
    anchored at (0, 0); past the last threshold whose FPR is within the
    limit, the last overlap value extends flat to the limit (thresholded
    predictions are step functions, so no interpolation toward the next
    observed point).
    """
    if len(score_maps) != len(gt_masks):
        raise ValueError("need one mask per score map")
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError("fpr_limit must be in (0, 1]")
    region_scores: list[np.ndarray] = []
    normal_chunks: list[np.ndarray] = []
    for smap, mask in zip(score_maps, gt_masks):
        smap = np.asarray(smap, dtype=np.float64)
        mask = np.asarray(mask) > 0.5
        if smap.shape != mask.shape:
            raise ValueError("score map and mask shapes differ")
        labeled, n_regions = ndimage.label(mask, structure=_EIGHT_CONNECTED)
        for r in range(1, n_regions + 1):
            region_scores.append(np.sort(smap[labeled == r]))
        normal_chunks.append(smap[~mask])
    if not region_scores:
        return None
    normal_scores = np.sort(np.concatenate(normal_chunks))
    if normal_scores.size == 0:
        raise ValueError("masks cover every pixel; FPR is undefined")

    pooled = np.concatenate([np.concatenate(region_scores), normal_scores])
    thresholds = _threshold_grid(pooled, num_thresholds)

    # counts of pixels >= t, vectorized over the descending threshold grid
    fprs = 1.0 - np.searchsorted(normal_scores, thresholds, side="left") / normal_scores.size
    pros = np.zeros_like(thresholds)
    for rs in region_scores:
        pros += 1.0 - np.searchsorted(rs, thresholds, side="left") / rs.size
    pros /= len(region_scores)

    fpr_curve = np.concatenate([[0.0], fprs])
    pro_curve = np.concatenate([[0.0], pros])
    keep = fpr_curve <= fpr_limit
    f, p = fpr_curve[keep], pro_curve[keep]
    if f[-1] < fpr_limit:
        f = np.append(f, fpr_limit)
        p = np.append(p, p[-1])
    return float(np.trapezoid(p, f) / fpr_limit)


@dataclass(frozen=True)
class MetricRow:
    class_name: str
    pixel_auroc: Optional[float]
    pixel_pro: Optional[float]
    image_auroc: Optional[float]
    image_ap: Optional[float]


@dataclass(frozen=True)
class MetricReport:
    rows: tuple[MetricRow, ...]   # per class, sorted by class name
    mean: MetricRow               # unweighted mean over defined class values

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "pixel_auroc", "pixel_pro", "image_auroc", "image_ap"])

        def fmt(v):
            return "" if v is None else f"{100.0 * v:.2f}"

        for row in (*self.rows, self.mean):
            writer.writerow(
                [row.class_name, fmt(row.pixel_auroc), fmt(row.pixel_pro),
                 fmt(row.image_auroc), fmt(row.image_ap)]
            )
        return buf.getvalue()

    def save_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


@dataclass
class EvalSample:
    """One test image's scores and ground truth, ready for metric pooling."""
    class_name: str
    s_seg: np.ndarray
    gt_map: np.ndarray
    s_det: float
    image_label: int


def _mean_or_none(values: list[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def evaluate(
    samples: Sequence[EvalSample],
    fpr_limit: float = 0.3,
    num_thresholds: int = 200,
    pooling: str = "per_class",
    workers: int = 1,
) -> MetricReport:
    """Per-class pixel/image metrics plus their unweighted mean.

    ``pooling="global"`` computes pixel metrics over all classes pooled
    (reported as a single extra row named "all"); the default pools pixels
    within each class, matching per-class result tables.  ``workers`` bounds
    parallel per-class computation; results are order-stable either way.
    """
    if not samples:
        raise ValueError("no evaluation samples")
    if pooling not in ("per_class", "global"):
        raise ValueError("pooling must be 'per_class' or 'global'")

    by_class: dict[str, list[EvalSample]] = {}
    for s in samples:
        by_class.setdefault(s.class_name, []).append(s)

    def class_row(cls: str) -> MetricRow:
        group = by_class[cls]
        pixel_scores = np.concatenate([g.s_seg.ravel() for g in group])
        pixel_labels = np.concatenate([(g.gt_map > 0.5).ravel() for g in group])
        image_scores = np.array([g.s_det for g in group])
        image_labels = np.array([g.image_label for g in group])
        return MetricRow(
            class_name=cls,
            pixel_auroc=roc_auc(pixel_scores, pixel_labels),
            pixel_pro=aupro(
                [g.s_seg for g in group], [g.gt_map for g in group],
                fpr_limit=fpr_limit, num_thresholds=num_thresholds,
            ),
            image_auroc=roc_auc(image_scores, image_labels),
            image_ap=average_precision(image_scores, image_labels),
        )

    classes = sorted(by_class)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(class_row, classes))
    else:
        rows = [class_row(cls) for cls in classes]

    if pooling == "global":
        all_scores = np.concatenate([s.s_seg.ravel() for s in samples])
        all_labels = np.concatenate([(s.gt_map > 0.5).ravel() for s in samples])
        rows.append(
            MetricRow(
                class_name="all",
                pixel_auroc=roc_auc(all_scores, all_labels),
                pixel_pro=aupro(
                    [s.s_seg for s in samples], [s.gt_map for s in samples],
                    fpr_limit=fpr_limit, num_thresholds=num_thresholds,
                ),
                image_auroc=roc_auc(
                    [s.s_det for s in samples], [s.image_label for s in samples]
                ),
                image_ap=average_precision(
                    [s.s_det for s in samples], [s.image_label for s in samples]
                ),
            )
        )

    mean = MetricRow(
        class_name="mean",
        pixel_auroc=_mean_or_none([r.pixel_auroc for r in rows]),
        pixel_pro=_mean_or_none([r.pixel_pro for r in rows]),
        image_auroc=_mean_or_none([r.image_auroc for r in rows]),
        image_ap=_mean_or_none([r.image_ap for r in rows]),
    )
    return MetricReport(rows=tuple(rows), mean=mean)
