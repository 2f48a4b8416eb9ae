"""Advection-diffusion global feature layers with progressive-K training."""

from .stencil import BACKEND as STENCIL_BACKEND

__version__ = "0.1.0"

__all__ = ["STENCIL_BACKEND", "__version__"]
