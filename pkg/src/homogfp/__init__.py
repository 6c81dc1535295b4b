"""Homogenized models for mixed Fick/Fokker-Planck diffusion with periodic space-time coefficients."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
