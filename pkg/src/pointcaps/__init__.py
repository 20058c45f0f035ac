"""Capsule-network autoencoder for point clouds, on a small numpy autodiff core."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig
from .data import (
    SHAPES,
    PointCloud,
    add_outliers,
    generate_shape,
    load_cloud,
    load_dataset,
    make_dataset,
    perturb_gaussian,
    save_cloud,
    write_dataset,
)
from .estimator import PointCapsClassifier
from .exceptions import (
    CheckpointVersionError,
    ConfigurationError,
    DivergenceError,
    InputError,
    NonFiniteError,
    ParseError,
    PointCapsError,
)
from .losses import chamfer_distance, margin_loss, total_loss
from .model import PointCapsNet, count_params_flops
from .optim import RAdam
from .routing import route, route_dynamic, route_euclidean
from .training import evaluate, noise_sweep, segment_eval, train

__version__ = "0.1.0"

__all__ = [
    "SHAPES",
    "CheckpointVersionError",
    "ConfigurationError",
    "DivergenceError",
    "InputError",
    "ModelConfig",
    "NonFiniteError",
    "ParseError",
    "PointCapsClassifier",
    "PointCapsError",
    "PointCapsNet",
    "PointCloud",
    "RAdam",
    "add_outliers",
    "chamfer_distance",
    "count_params_flops",
    "evaluate",
    "generate_shape",
    "load_checkpoint",
    "load_cloud",
    "load_dataset",
    "make_dataset",
    "margin_loss",
    "noise_sweep",
    "perturb_gaussian",
    "route",
    "route_dynamic",
    "route_euclidean",
    "save_checkpoint",
    "save_cloud",
    "segment_eval",
    "total_loss",
    "train",
    "write_dataset",
]
