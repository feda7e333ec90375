"""Sparse multi-scale feature fusion for volumetric segmentation, in numpy."""
from .model import ArchConfig, ModelParams, build_model, forward, full_arch
from .tensor import ShapeError

__version__ = "0.1.0"

__all__ = ["ArchConfig", "ModelParams", "ShapeError", "build_model", "forward", "full_arch"]
