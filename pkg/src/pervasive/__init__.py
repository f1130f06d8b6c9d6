"""Pervasive-attention translation: a 2D DenseNet over the source x target grid."""

from .model import ModelConfig, PervasiveNetwork, count_parameters

__version__ = "0.1.0"

__all__ = ["ModelConfig", "PervasiveNetwork", "count_parameters"]
