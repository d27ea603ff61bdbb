"""Dual-branch (coarse classification + fine segmentation) Swin U-shaped network.

Everything runs on :mod:`sks.tensor`, a small numpy reverse-mode autodiff engine.
"""
from .encoder import ModelConfig
from .fusion import AblationFlags
from .model import SKSModel

__all__ = ["ModelConfig", "AblationFlags", "SKSModel"]
__version__ = "0.1.0"
