"""Hyperbolic (Lorentz model) EEG classifier with subject-specific low-rank adapters."""

from .model import LatteConfig, LatteModel, PretrainDecoder

__all__ = ["LatteConfig", "LatteModel", "PretrainDecoder"]
__version__ = "0.1.0"
