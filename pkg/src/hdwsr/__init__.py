"""Residual diffusion super-resolution guided by Haar wavelet subbands."""
from .config import AblationConfig, DataConfig, OptimConfig, RunConfig
from .model import HDWNet, ModelConfig

__all__ = ["AblationConfig", "DataConfig", "HDWNet", "ModelConfig", "OptimConfig", "RunConfig"]
__version__ = "0.1.0"
