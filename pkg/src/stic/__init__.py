"""Generative classifiers trained by recurrent self-analysis."""

from .models import ClassifierModel, ScoreModel, build_model, cnn, mlp
from .samplers import SamplerConfig, synthesize
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ClassifierModel",
    "ScoreModel",
    "SamplerConfig",
    "TrainConfig",
    "build_model",
    "cnn",
    "mlp",
    "synthesize",
    "train",
]
