"""Hybrid CNN + self-constructing graph segmentation for grayscale slices."""

from .data import ImageSample, DatasetSplit, batch_iterator, load_sample, make_synthetic_dataset, split_dataset
from .errors import CheckpointError, ConfigError, NonFiniteLossError, ShapeError, ValidationError
from .losses import LossBundle, LossConfig, composite_loss
from .model import ModelConfig, ScgSegNet, SegOutput, build_model

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DatasetSplit", "ImageSample", "LossBundle", "LossConfig",
    "ModelConfig", "NonFiniteLossError", "ScgSegNet", "SegOutput", "ShapeError", "ValidationError",
    "batch_iterator", "build_model", "composite_loss", "load_sample", "make_synthetic_dataset",
    "split_dataset",
]
