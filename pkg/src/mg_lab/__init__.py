"""Model-guidance training and evaluation on labeled 2D Gaussian mixtures."""
from .config import ExperimentConfig, load_config
from .mixture import LabeledMixture, grid_two_class
from .trainer import ModelConfig, TrainConfig

__all__ = ["ExperimentConfig", "LabeledMixture", "ModelConfig", "TrainConfig", "grid_two_class", "load_config"]
__version__ = "0.1.0"
