"""Prompt-parameter optimization and checkpoint round-tripping.

Training iterates the auxiliary dataset's masked split, builds per-layer
vision-enhanced score maps at ground-truth resolution for each image, and
minimizes the layer-summed focal+dice objective with Adam.  Class names are
used verbatim in the template (no class-name filtering at training time) and
only the vision-enhanced branch is driven; the query-only branch exists at
inference only.  Runs are deterministic given the seed; the constant learning
rate, absent weight decay, and absent gradient clipping are recorded in the
checkpoint header.

Checkpoint file layout (version 1)::

    PADCKPT1 | u32 header length | header JSON | raw parameter blob

The header JSON (sorted keys) carries the encoder spec, the config set, the
training-dataset id, and a parameter index of (name, shape, offset, nbytes);
the blob is the concatenation of little-endian float32 arrays in index
order.  save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .data import DatasetManifest, load_sample
from .encoder import EncoderSpec
from .losses import LossConfig, total_loss
from .prompting import PromptBank, PromptTemplate
from .scoring import ScoringConfig, vision_branch_maps

FORMAT_VERSION = 1
MAGIC = b"PADCKPT1"


class CheckpointError(RuntimeError):
    """Raised for unreadable, corrupt, or version-mismatched checkpoints."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 4e-5
    epochs: int = 15
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_split: str = "test"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Checkpoint:
    header: dict
    parameters: dict[str, np.ndarray]  # little-endian float32 arrays


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_records: list[dict] = field(default_factory=list)

    def log_lines(self) -> list[str]:
        return [
            f"epoch {r['epoch']} step {r['step']} loss {r['loss']:.6f}"
            for r in self.log_records
        ]


def make_header(
    spec: EncoderSpec,
    scoring: ScoringConfig,
    loss: LossConfig,
    train_cfg: TrainConfig,
    dataset_id: str,
) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "encoder_spec": asdict(spec),
        "scoring_config": asdict(scoring),
        "loss_config": asdict(loss),
        "train_config": asdict(train_cfg),
        "dataset_id": dataset_id,
        "regularization": {"weight_decay": 0.0, "grad_clip": None, "lr_schedule": "constant"},
    }


def spec_from_header(header: dict) -> EncoderSpec:
    d = dict(header["encoder_spec"])
    d["selected_layers"] = tuple(d["selected_layers"])
    d["vision_dims"] = tuple(d["vision_dims"])
    return EncoderSpec(**d)


def checkpoint_from_bank(bank: PromptBank, header: dict) -> Checkpoint:
    params = {
        name: p.detach().cpu().numpy().astype("<f4")
        for name, p in bank.parameter_arrays().items()
    }
    return Checkpoint(header=dict(header), parameters=params)


def bank_from_checkpoint(ckpt: Checkpoint) -> PromptBank:
    spec = spec_from_header(ckpt.header)
    seed = ckpt.header.get("train_config", {}).get("seed", 0)
    bank = PromptBank(spec, seed=seed)
    with torch.no_grad():
        named = dict(bank.named_parameters())
        if set(named) != set(ckpt.parameters):
            missing = sorted(set(named) ^ set(ckpt.parameters))
            raise CheckpointError(f"parameter inventory mismatch: {missing}")
        for name, arr in ckpt.parameters.items():
            if tuple(named[name].shape) != arr.shape:
                raise CheckpointError(
                    f"parameter {name} has shape {arr.shape}, "
                    f"expected {tuple(named[name].shape)}"
                )
            named[name].copy_(torch.from_numpy(arr.copy()))
    return bank


def train(
    manifest: DatasetManifest,
    encoder,
    train_cfg: TrainConfig | None = None,
    loss_cfg: LossConfig | None = None,
    scoring_cfg: ScoringConfig | None = None,
    template: PromptTemplate | None = None,
    dataset_id: str = "",
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Optimize a fresh PromptBank on the manifest's training split."""
    train_cfg = train_cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    scoring_cfg = scoring_cfg or ScoringConfig()
    template = template or PromptTemplate()
    spec = encoder.spec

    entries = manifest.select(split=train_cfg.train_split)
    if not entries:
        raise ValueError(
            f"manifest has no '{train_cfg.train_split}' entries to train on"
        )

    # The encoder is frozen, so features are encoded once up front.
    stacks, gts, names = [], [], []
    for entry in entries:
        sample = load_sample(entry, spec.image_size)
        stacks.append(encoder.encode_image(sample.image))
        gts.append(torch.from_numpy(sample.gt_map))
        names.append(entry.class_name)

    bank = PromptBank(spec, seed=train_cfg.seed)
    opt = torch.optim.Adam(
        bank.parameters(),
        lr=train_cfg.learning_rate,
        betas=(train_cfg.beta1, train_cfg.beta2),
        eps=train_cfg.eps,
    )
    shuffler = torch.Generator().manual_seed(train_cfg.seed + 1)
    target = (spec.image_size, spec.image_size)

    records: list[dict] = []
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = torch.randperm(len(entries), generator=shuffler).tolist()
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            loss = None
            for idx in batch:
                maps = vision_branch_maps(
                    stacks[idx], names[idx], bank, encoder,
                    template, target, scoring_cfg.temperature,
                )
                term = total_loss(maps, gts[idx], loss_cfg)
                loss = term if loss is None else loss + term
            loss = loss / len(batch)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} step {step + 1}; aborting"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            record = {"epoch": epoch, "step": step, "loss": loss.item()}
            records.append(record)
            if on_step is not None:
                on_step(record)

    header = make_header(spec, scoring_cfg, loss_cfg, train_cfg, dataset_id)
    return TrainResult(checkpoint=checkpoint_from_bank(bank, header), log_records=records)


# -- serialization --------------------------------------------------------


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomic write (temp file + rename) of the binary checkpoint format."""
    names = sorted(ckpt.parameters)
    index = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(ckpt.parameters[name], dtype="<f4")
        raw = arr.tobytes()
        index.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)

    header = dict(ckpt.header)
    header["format_version"] = FORMAT_VERSION
    header["params"] = index
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def save_checkpoint(bank: PromptBank, header: dict, path) -> Checkpoint:
    ckpt = checkpoint_from_bank(bank, header)
    write_checkpoint(ckpt, path)
    return ckpt


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise CheckpointError(f"corrupt checkpoint {path}: truncated at offset {len(raw)}")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(
            f"{path} is not a checkpoint of this format version (bad magic)"
        )
    (header_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    header_start = len(MAGIC) + 4
    blob_start = header_start + header_len
    if len(raw) < blob_start:
        raise CheckpointError(
            f"corrupt checkpoint {path}: header truncated at offset {len(raw)}"
        )
    try:
        header = json.loads(raw[header_start:blob_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: bad header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format_version {header.get('format_version')}; "
            f"this build reads version {FORMAT_VERSION}"
        )

    params = {}
    total = 0
    for meta in header["params"]:
        start = blob_start + meta["offset"]
        end = start + meta["nbytes"]
        if end > len(raw):
            raise CheckpointError(
                f"corrupt checkpoint {path}: parameter {meta['name']} needs bytes "
                f"{start}..{end} but file ends at {len(raw)}"
            )
        arr = np.frombuffer(raw[start:end], dtype="<f4").reshape(meta["shape"]).copy()
        params[meta["name"]] = arr
        total += meta["nbytes"]
    if blob_start + total != len(raw):
        raise CheckpointError(
            f"corrupt checkpoint {path}: {len(raw) - blob_start - total} unexpected "
            f"trailing bytes"
        )
    header.pop("params")
    return Checkpoint(header=header, parameters=params)


def load_checkpoint(path) -> tuple[PromptBank, dict]:
    ckpt = read_checkpoint(path)
    return bank_from_checkpoint(ckpt), ckpt.header
