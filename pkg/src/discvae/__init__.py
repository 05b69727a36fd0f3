"""Disentangled sequence clustering VAE for wheelchair intent modelling."""

from .core import ContractError
from .model import DiSCVAE, ModelConfig

__all__ = ["ContractError", "DiSCVAE", "ModelConfig"]
__version__ = "0.1.0"
