"""Deformation-aware adversarial synthesis for misaligned multimodal image pairs."""

from .imaging import Image2D, PairedSample, DatasetManifest, load_dataset, normalize, foreground_mask
from .losses import LossWeights, LossReport
from .networks import DaGanModel, ModelSpec
from .training import TrainConfig, AblationConfig, PRESETS, train, train_step, synthesize

__version__ = "0.1.0"

__all__ = [
    "Image2D",
    "PairedSample",
    "DatasetManifest",
    "load_dataset",
    "normalize",
    "foreground_mask",
    "LossWeights",
    "LossReport",
    "DaGanModel",
    "ModelSpec",
    "TrainConfig",
    "AblationConfig",
    "PRESETS",
    "train",
    "train_step",
    "synthesize",
]
