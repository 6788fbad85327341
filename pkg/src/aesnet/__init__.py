"""Desk-scale multi-attribute aesthetic scoring toolkit."""

from .attributes import (
    AttributeLabels,
    Image,
    colorfulness,
    colorfulness_level,
    composition_offset,
    exposure_bin,
)
from .blocks import BlockParams, GradientCheckError, ShapeError, Tensor, finite_diff_check
from .datagen import ManifestRecord, SceneSpec, gen_image, make_dataset, score_to_distribution, true_score
from .losses import LossConfig, SortedBatch, emd_loss, mse_loss, relative_relation_loss, total_loss, triplet_relative
from .metrics import EvalReport, binary_accuracy, evaluate_split, plcc, srcc
from .model import AestheticNet, ModelConfig, Prediction, load_checkpoint, save_checkpoint
from .harness import TrainConfig, TrainLog, build_batches, plateau_events, train

__version__ = "0.1.0"

__all__ = [
    "AestheticNet",
    "AttributeLabels",
    "BlockParams",
    "EvalReport",
    "GradientCheckError",
    "Image",
    "LossConfig",
    "ManifestRecord",
    "ModelConfig",
    "Prediction",
    "SceneSpec",
    "ShapeError",
    "SortedBatch",
    "Tensor",
    "TrainConfig",
    "TrainLog",
    "binary_accuracy",
    "build_batches",
    "colorfulness",
    "colorfulness_level",
    "composition_offset",
    "emd_loss",
    "evaluate_split",
    "exposure_bin",
    "finite_diff_check",
    "gen_image",
    "load_checkpoint",
    "make_dataset",
    "mse_loss",
    "plateau_events",
    "plcc",
    "relative_relation_loss",
    "save_checkpoint",
    "score_to_distribution",
    "srcc",
    "total_loss",
    "train",
    "triplet_relative",
    "true_score",
    "__version__",
]
