"""Zero-shot anomaly detection with multi-layer prompt learning.

A frozen vision-language encoder pair (synthetic at desk scale, real weights
via adapters) plus a small bank of learnable prompt parameters, trained with
focal+dice on score maps and run through a dual-branch inference pipeline
with class-name filtering, score fusion, and AUROC/AUPRO/AP evaluation.
"""

from .cnf import CnfConfig, apply_cnf, filter_class_name, strip_numeric
from .config import RunConfig
from .data import DatasetManifest, ManifestEntry, Sample, load_sample, scan_dataset
from .encoder import (
    EncoderSpec,
    PatchFeatureStack,
    SyntheticEncoder,
    TokenSequence,
    load_encoder,
    make_synthetic_encoder,
    register_encoder_adapter,
)
from .losses import LossConfig, dice_loss, focal_loss, total_loss
from .metrics import EvalSample, MetricReport, aupro, average_precision, evaluate, roc_auc
from .prompting import (
    PromptBank,
    PromptTemplate,
    assemble_prompt,
    augment_queries,
    embed_prompt_pair,
    vision_prompt,
)
from .scoring import (
    AnomalyResult,
    Pipeline,
    ScoringConfig,
    fuse_maps,
    gaussian_smooth,
    image_score,
    infer,
    project_patches,
    score_map,
)
from .train import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    train,
    write_checkpoint,
)

__version__ = "0.1.0"
