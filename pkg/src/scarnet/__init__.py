"""Dual-pathway (transformer + UNet) cardiac LGE scar segmentation on synthetic phantoms."""

from .config import RunConfig, load_config
from .model import ModelConfig, ScarNet, build_model

__version__ = "0.1.0"

__all__ = ["RunConfig", "load_config", "ModelConfig", "ScarNet", "build_model"]
