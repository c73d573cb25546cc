"""Recurrent variational network for multi-coil accelerated MRI reconstruction."""

from .model import ModelConfig, RecurrentVarNet
from .training import TrainConfig

__all__ = ["ModelConfig", "RecurrentVarNet", "TrainConfig"]
__version__ = "0.1.0"
