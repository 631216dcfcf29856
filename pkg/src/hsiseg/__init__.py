"""Hyperspectral image segmentation via tri-spectral ensembles.

Converts a hyperspectral cube into a set of contrast-stretched tri-spectral
images, trains an image-level segmentation network whose transformer context
module works over adaptively clustered homogeneous areas, and fuses the
per-image predictions by hard or soft voting.
"""

__version__ = "0.1.0"

from .autodiff import Parameter, Tensor, grad_check, no_grad, poly_lr
from .formats import ClassMap, HsiCube, LabelMap, ProbMap
from .model import BackboneConfig, DualContextNet
from .pipeline import (
    Metrics,
    TrainConfig,
    evaluate,
    hard_vote,
    predict_image,
    soft_vote,
    train,
)
from .synth import synth_scene
from .trispec import compute_capacity, enumerate_triplets, generate_set, linear_stretch

__all__ = [
    "BackboneConfig",
    "ClassMap",
    "DualContextNet",
    "HsiCube",
    "LabelMap",
    "Metrics",
    "Parameter",
    "ProbMap",
    "Tensor",
    "TrainConfig",
    "compute_capacity",
    "enumerate_triplets",
    "evaluate",
    "generate_set",
    "grad_check",
    "hard_vote",
    "linear_stretch",
    "no_grad",
    "poly_lr",
    "predict_image",
    "soft_vote",
    "synth_scene",
    "train",
]
