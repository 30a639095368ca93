"""MVTec-style dataset ingestion.

Layout scanned::

    <root>/<class>/train/good/*.png
    <root>/<class>/test/<defect>/*.png
    <root>/<class>/ground_truth/<defect>/<stem>_mask.png   (or <stem>.png)

Manifests are plain data, deterministically ordered, and serialize to JSON
with stable key order.  Loading normalizes images to [0, 1] (bilinear resize)
and masks to {0, 1} (nearest-neighbor resize, then binarized at 0.5);
encoder-specific mean/std normalization is the encoder's own business.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
GOOD = "good"


class DatasetError(RuntimeError):
    """Raised for broken dataset layouts or unreadable files."""


@dataclass(frozen=True)
class ManifestEntry:
    class_name: str
    split: str
    defect_type: str
    image_path: str
    mask_path: Optional[str]


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    classes: tuple[str, ...]
    entries: tuple[ManifestEntry, ...]

    def select(self, split: Optional[str] = None, class_name: Optional[str] = None):
        return [
            e
            for e in self.entries
            if (split is None or e.split == split)
            and (class_name is None or e.class_name == class_name)
        ]

    def to_json(self) -> str:
        doc = {
            "root": self.root,
            "classes": list(self.classes),
            "entries": [asdict(e) for e in self.entries],
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return DatasetManifest(
            root=doc["root"],
            classes=tuple(doc["classes"]),
            entries=tuple(ManifestEntry(**e) for e in doc["entries"]),
        )

    @staticmethod
    def load(path) -> "DatasetManifest":
        return DatasetManifest.from_json(Path(path).read_text())


@dataclass
class Sample:
    image: np.ndarray      # [h, w, 3] float32 in [0, 1]
    gt_map: np.ndarray     # [h, w] float32 in {0, 1}
    image_label: int       # 1 iff gt_map has any nonzero pixel
    class_name: str
    defect_type: str
    split: str


def _list_images(directory: Path) -> list[Path]:
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def _find_mask(gt_dir: Path, image: Path) -> Optional[Path]:
    for candidate in (f"{image.stem}_mask", image.stem):
        for ext in sorted(IMAGE_EXTENSIONS):
            p = gt_dir / f"{candidate}{ext}"
            if p.is_file():
                return p
    return None


def scan_dataset(root, layout: str = "mvtec") -> DatasetManifest:
    """Build a complete, deterministically ordered manifest of an MVTec tree."""
    if layout != "mvtec":
        raise ValueError(f"unknown layout '{layout}'")
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise DatasetError(f"dataset root has no class directories: {root}")

    entries: list[ManifestEntry] = []
    for cls in classes:
        for split in ("train", "test"):
            split_dir = root / cls / split
            if not split_dir.is_dir():
                continue
            for defect_dir in sorted(d for d in split_dir.iterdir() if d.is_dir()):
                defect = defect_dir.name
                gt_dir = root / cls / "ground_truth" / defect
                for image in _list_images(defect_dir):
                    mask = None
                    if defect != GOOD:
                        mask = _find_mask(gt_dir, image)
                        if mask is None:
                            raise DatasetError(
                                f"defect image has no ground-truth mask: {image} "
                                f"(searched {gt_dir})"
                            )
                    entries.append(
                        ManifestEntry(
                            class_name=cls,
                            split=split,
                            defect_type=defect,
                            image_path=str(image),
                            mask_path=str(mask) if mask else None,
                        )
                    )

    entries.sort(key=lambda e: (e.class_name, e.split, e.defect_type, e.image_path))
    return DatasetManifest(root=str(root), classes=tuple(classes), entries=tuple(entries))


def _nearest_resize(arr: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbor resize with center-aligned index mapping."""
    h, w = arr.shape
    rows = np.minimum((np.floor((np.arange(size) + 0.5) * h / size)).astype(int), h - 1)
    cols = np.minimum((np.floor((np.arange(size) + 0.5) * w / size)).astype(int), w - 1)
    return arr[rows][:, cols]


def load_sample(entry: ManifestEntry, image_size: int) -> Sample:
    """Load one manifest entry as normalized arrays at the configured size."""
    try:
        with Image.open(entry.image_path) as img:
            rgb = img.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
            image = np.asarray(rgb, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {entry.image_path}: {exc}") from exc

    if entry.mask_path is None:
        gt = np.zeros((image_size, image_size), dtype=np.float32)
    else:
        try:
            with Image.open(entry.mask_path) as m:
                raw = np.asarray(m.convert("L"), dtype=np.float64) / 255.0
        except (OSError, ValueError) as exc:
            raise DatasetError(f"cannot read mask {entry.mask_path}: {exc}") from exc
        gt = (_nearest_resize(raw, image_size) >= 0.5).astype(np.float32)

    return Sample(
        image=image,
        gt_map=gt,
        image_label=int(gt.max() > 0),
        class_name=entry.class_name,
        defect_type=entry.defect_type,
        split=entry.split,
    )
