"""Figure rendering for the report paths (training log, metric tables)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_loss_curve(log_records, path) -> Path:
    """Per-step loss with a per-epoch mean overlay."""
    path = Path(path)
    steps = [r["step"] for r in log_records]
    losses = [r["loss"] for r in log_records]
    epochs = sorted({r["epoch"] for r in log_records})
    epoch_means = [
        np.mean([r["loss"] for r in log_records if r["epoch"] == e]) for e in epochs
    ]
    epoch_steps = [
        max(r["step"] for r in log_records if r["epoch"] == e) for e in epochs
    ]

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.8, alpha=0.55, label="step loss")
    ax.plot(epoch_steps, epoch_means, "o-", ms=3, lw=1.4, label="epoch mean")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_metric_bars(report, path) -> Path:
    """Grouped per-class bars for the four evaluation metrics."""
    path = Path(path)
    rows = list(report.rows) + [report.mean]
    names = [r.class_name for r in rows]
    metrics = [
        ("pixel AUROC", [r.pixel_auroc for r in rows]),
        ("pixel PRO", [r.pixel_pro for r in rows]),
        ("image AUROC", [r.image_auroc for r in rows]),
        ("image AP", [r.image_ap for r in rows]),
    ]

    x = np.arange(len(names))
    width = 0.2
    fig, ax = plt.subplots(figsize=(max(6, 1.6 * len(names)), 4))
    for i, (label, values) in enumerate(metrics):
        vals = [100.0 * v if v is not None else 0.0 for v in values]
        ax.bar(x + (i - 1.5) * width, vals, width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("%")
    ax.set_ylim(0, 105)
    ax.set_title("evaluation metrics by class")
    ax.legend(frameon=False, ncol=2, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
