"""Discrete point flow networks for variable-size 3D point cloud generation."""

from .core import ParamStore, Rng, Tape
from .model import DPFNet, ModelConfig

__all__ = ["DPFNet", "ModelConfig", "ParamStore", "Rng", "Tape"]
__version__ = "0.1.0"
