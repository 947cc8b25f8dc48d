"""SE/SPP-augmented DenseNet and ResNet18 classifiers for two-channel images, on a numpy autodiff core."""

from .config import ExperimentConfig
from .data import CohortSpec, generate_cohort
from .evaluation import cross_validate
from .models import ModelConfig, build_model
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CohortSpec",
    "ExperimentConfig",
    "ModelConfig",
    "TrainConfig",
    "build_model",
    "cross_validate",
    "generate_cohort",
    "train",
]
