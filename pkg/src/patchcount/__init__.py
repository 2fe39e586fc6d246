"""Patch-based crowd counting with density-aware patch rescaling."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    CrowdClass,
    DatasetStats,
    ImageRecord,
    Patch,
    generate_synthetic,
    label_patch,
    load_manifest,
    make_gt_segmap,
    write_dataset,
)
from .evaluation import EvalReport, evaluate, infer_image
from .interp import bilinear_resize
from .losses import classifier_report, joint_loss, mae, rmse
from .network import ArchConfig, CrowdNet
from .pipeline import (
    CountResult,
    aggregate_counts,
    compute_cc_max,
    count_image,
    tile_image,
)
from .rescale import RescaleOutcome, rescale_patch
from .train import TrainConfig, TrainReport, grad_check, lr_at, split_dataset, train

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "CountResult",
    "CrowdClass",
    "CrowdNet",
    "DatasetStats",
    "EvalReport",
    "ImageRecord",
    "Patch",
    "RescaleOutcome",
    "TrainConfig",
    "TrainReport",
    "aggregate_counts",
    "bilinear_resize",
    "classifier_report",
    "compute_cc_max",
    "count_image",
    "evaluate",
    "generate_synthetic",
    "grad_check",
    "infer_image",
    "joint_loss",
    "label_patch",
    "load_checkpoint",
    "load_manifest",
    "lr_at",
    "mae",
    "make_gt_segmap",
    "rescale_patch",
    "rmse",
    "save_checkpoint",
    "split_dataset",
    "tile_image",
    "train",
    "write_dataset",
]
