"""Desk-scale denoising diffusion: schedules, objectives, guidance, sampling, training and FID."""

from .backend import get_dtype, precision, set_precision
from .errors import DeskDiffError

__version__ = "0.1.0"

__all__ = ["get_dtype", "precision", "set_precision", "DeskDiffError", "__version__"]
