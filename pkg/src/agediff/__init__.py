"""Diffusion-based face age editing at desk scale."""

from agediff.errors import AgeDiffError

__version__ = "0.1.0"

K_MAX_AGE = 100

__all__ = ["AgeDiffError", "K_MAX_AGE", "__version__"]
