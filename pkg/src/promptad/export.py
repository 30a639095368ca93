"""Score-map files: 16-bit grayscale PNG + JSON sidecar, optional raw dump.

The PNG stores the map min-max normalized to the uint16 range; the sidecar
records the raw min/max (so values are recoverable), the image score and its
confidence weight, and identifying fields.  With ``dump_raw`` a float32
``.npy`` alongside preserves the exact values; readers prefer it when
present.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .data import ManifestEntry
from .scoring import AnomalyResult

SIDECAR_VERSION = 1


def prediction_key(entry: ManifestEntry) -> str:
    stem = Path(entry.image_path).stem
    return f"{entry.class_name}__{entry.split}__{entry.defect_type}__{stem}"


def export_result(
    result: AnomalyResult, entry: ManifestEntry, out_dir, dump_raw: bool = False
) -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    key = prediction_key(entry)

    s_seg = np.asarray(result.s_seg, dtype=np.float64)
    raw_min, raw_max = float(s_seg.min()), float(s_seg.max())
    if raw_max > raw_min:
        scaled = np.round((s_seg - raw_min) / (raw_max - raw_min) * 65535.0)
    else:
        scaled = np.zeros_like(s_seg)
    Image.fromarray(scaled.astype(np.uint16)).save(out / f"{key}.png")

    sidecar = {
        "format_version": SIDECAR_VERSION,
        "image_path": entry.image_path,
        "class_name": entry.class_name,
        "cnf_class": result.class_name,
        "defect_type": entry.defect_type,
        "split": entry.split,
        "s_det": result.s_det,
        "w": result.w,
        "raw_min": raw_min,
        "raw_max": raw_max,
        "height": int(s_seg.shape[0]),
        "width": int(s_seg.shape[1]),
    }
    (out / f"{key}.json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")

    if dump_raw:
        np.save(out / f"{key}.npy", s_seg.astype(np.float32))
    return key


def has_prediction(pred_dir, entry: ManifestEntry) -> bool:
    key = prediction_key(entry)
    d = Path(pred_dir)
    return (d / f"{key}.json").is_file() and (
        (d / f"{key}.png").is_file() or (d / f"{key}.npy").is_file()
    )


def load_prediction(pred_dir, entry: ManifestEntry) -> tuple[np.ndarray, dict]:
    """Return (score map, sidecar).  Prefers the exact .npy dump over the PNG."""
    key = prediction_key(entry)
    d = Path(pred_dir)
    sidecar_path = d / f"{key}.json"
    if not sidecar_path.is_file():
        raise FileNotFoundError(f"no prediction sidecar for {entry.image_path} ({key}.json)")
    sidecar = json.loads(sidecar_path.read_text())

    npy = d / f"{key}.npy"
    if npy.is_file():
        return np.load(npy).astype(np.float64), sidecar
    png = d / f"{key}.png"
    if not png.is_file():
        raise FileNotFoundError(f"no prediction map for {entry.image_path} ({key}.png)")
    with Image.open(png) as img:
        quantized = np.asarray(img, dtype=np.float64)
    lo, hi = sidecar["raw_min"], sidecar["raw_max"]
    return lo + quantized / 65535.0 * (hi - lo), sidecar
