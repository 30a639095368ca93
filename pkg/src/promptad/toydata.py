"""Synthetic blob dataset in MVTec layout, for desk-scale runs and tests.

Normal images are a smooth per-class gradient with light noise; defect images
additionally carry a bright patch-aligned rectangle, which is also the
ground-truth mask.  Deterministic given the seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def _background(rng: np.random.Generator, size: int, phase: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    base = 0.35 + 0.2 * np.sin(2 * np.pi * (xx + phase)) * np.cos(np.pi * yy)
    img = np.stack([base, base * 0.9 + 0.05, base * 0.8 + 0.1], axis=-1)
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _plant_blob(
    img: np.ndarray, rng: np.random.Generator, patch: int, blob_patches: int
) -> np.ndarray:
    size = img.shape[0]
    grid = size // patch
    span = blob_patches * patch
    r = int(rng.integers(0, grid - blob_patches + 1)) * patch
    c = int(rng.integers(0, grid - blob_patches + 1)) * patch
    img[r:r + span, c:c + span, 0] = 0.95
    img[r:r + span, c:c + span, 1] = 0.15
    img[r:r + span, c:c + span, 2] = 0.1
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[r:r + span, c:c + span] = 255
    return mask


def _save(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def write_blob_dataset(
    root,
    classes: tuple[str, ...] = ("widget",),
    image_size: int = 64,
    patch_size: int = 8,
    blob_patches: int = 2,
    n_train_good: int = 4,
    n_test_good: int = 4,
    n_test_defect: int = 8,
    seed: int = 0,
) -> Path:
    """Write an MVTec-style tree of gradient images with planted blobs."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for ci, cls in enumerate(classes):
        phase = 0.17 * ci
        for i in range(n_train_good):
            img = _background(rng, image_size, phase)
            _save(root / cls / "train" / "good" / f"{i:03d}.png",
                  (img * 255).astype(np.uint8))
        for i in range(n_test_good):
            img = _background(rng, image_size, phase)
            _save(root / cls / "test" / "good" / f"{i:03d}.png",
                  (img * 255).astype(np.uint8))
        for i in range(n_test_defect):
            img = _background(rng, image_size, phase)
            mask = _plant_blob(img, rng, patch_size, blob_patches)
            _save(root / cls / "test" / "blob" / f"{i:03d}.png",
                  (img * 255).astype(np.uint8))
            _save(root / cls / "ground_truth" / "blob" / f"{i:03d}_mask.png", mask)
    return root
