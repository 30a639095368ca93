"""Single flat JSON run configuration shared by every CLI command.

Defaults follow the reference operating point: 518px inputs, 14px patches,
four evenly spaced layers of a 24-layer vision encoder, fusion weight 0.8,
smoothing sigma 9, top-pixel counts 500/2500, Adam at 4e-5 for 15 epochs.
Unknown keys are rejected; CLI flags override file values; every command
writes the resolved snapshot beside its outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .cnf import CnfConfig
from .encoder import EncoderSpec
from .losses import LossConfig
from .scoring import ScoringConfig
from .train import TrainConfig


@dataclass
class RunConfig:
    # paths / orchestration
    data_root: Optional[str] = None
    output_dir: Optional[str] = None
    dataset_id: str = ""
    workers: int = 1
    seed: int = 0

    # encoder
    encoder: str = "synthetic"
    encoder_weights: Optional[str] = None
    encoder_seed: int = 0
    image_size: int = 518
    patch_size: int = 14
    num_vision_layers: int = 24
    selected_layers: tuple[int, ...] = (6, 12, 18, 24)
    vision_dims: tuple[int, ...] | int = 1024
    text_dim: int = 768
    text_seq_len: int = 77
    num_text_layers: int = 12

    # scoring / fusion
    alpha: float = 0.8
    sigma: float = 9.0
    n1: int = 500
    n2: int = 2500
    temperature: float = 100.0

    # losses
    dice_epsilon: float = 1e-6
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    # training
    learning_rate: float = 4e-5
    epochs: int = 15
    batch_size: int = 8
    train_split: str = "test"

    # class name filtering
    cnf_enabled: bool = True
    generic_term: str = "object"
    cnf_per_class: bool = False

    # evaluation
    aupro_fpr_limit: float = 0.3
    aupro_thresholds: int = 200
    metric_pooling: str = "per_class"

    def __post_init__(self):
        if isinstance(self.vision_dims, int):
            self.vision_dims = (self.vision_dims,) * self.num_vision_layers
        else:
            self.vision_dims = tuple(self.vision_dims)
        self.selected_layers = tuple(self.selected_layers)
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.metric_pooling not in ("per_class", "global"):
            raise ValueError("metric_pooling must be 'per_class' or 'global'")
        if not 0.0 < self.aupro_fpr_limit <= 1.0:
            raise ValueError("aupro_fpr_limit must be in (0, 1]")
        # constructing the sub-configs validates their invariants early
        self.encoder_spec()
        self.scoring_config()
        self.loss_config()
        self.train_config()
        self.cnf_config()

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise FileNotFoundError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValueError(f"config file {path} must hold a JSON object")
        return cls.from_dict(doc)

    def override(self, **kwargs) -> "RunConfig":
        """New config with the non-None keyword values applied."""
        doc = asdict(self)
        for key, value in kwargs.items():
            if value is not None:
                if key not in doc:
                    raise ValueError(f"unknown config key: {key}")
                doc[key] = value
        return RunConfig.from_dict(doc)

    # -- sub-config views -------------------------------------------------

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(
            image_size=self.image_size,
            patch_size=self.patch_size,
            num_vision_layers=self.num_vision_layers,
            selected_layers=self.selected_layers,
            vision_dims=self.vision_dims,
            text_dim=self.text_dim,
            text_seq_len=self.text_seq_len,
            num_text_layers=self.num_text_layers,
            seed=self.encoder_seed,
        )

    def scoring_config(self) -> ScoringConfig:
        return ScoringConfig(
            alpha=self.alpha, sigma=self.sigma, n1=self.n1, n2=self.n2,
            temperature=self.temperature,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            dice_epsilon=self.dice_epsilon,
            focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            train_split=self.train_split,
        )

    def cnf_config(self) -> CnfConfig:
        return CnfConfig(
            generic_term=self.generic_term,
            enabled=self.cnf_enabled,
            per_class=self.cnf_per_class,
        )

    # -- snapshots ---------------------------------------------------------

    def resolved(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.resolved(), sort_keys=True, indent=2) + "\n"

    def save_snapshot(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "resolved_config.json"
        path.write_text(self.to_json())
        return path
