"""Multi-camera multiple-instance learning for weakly supervised video anomaly detection."""

__version__ = "0.1.0"

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Dataset, MultiCameraScene, SyntheticSpec, generate_synthetic, load_manifest, write_dataset
from .errors import MCMILError, TrainingDivergenceError, ValidationError
from .evaluation import FusionConfig, MetricsReport, auc_score, confusion, metrics, roc_points
from .nn import RegressorParams, backward, forward, gradient_check, init_params
from .objective import LossConfig, bag_union, combine_losses, mc_loss, ranking_loss
from .trainer import TrainConfig, evaluate, run_experiment, train

__all__ = [
    "Dataset",
    "FusionConfig",
    "LossConfig",
    "MCMILError",
    "MetricsReport",
    "MultiCameraScene",
    "RegressorParams",
    "SyntheticSpec",
    "TrainConfig",
    "TrainingDivergenceError",
    "ValidationError",
    "auc_score",
    "backward",
    "bag_union",
    "combine_losses",
    "confusion",
    "evaluate",
    "forward",
    "generate_synthetic",
    "gradient_check",
    "init_params",
    "load_checkpoint",
    "load_manifest",
    "mc_loss",
    "metrics",
    "ranking_loss",
    "roc_points",
    "run_experiment",
    "save_checkpoint",
    "train",
    "write_dataset",
]
