"""Desk-scale latent diffusion with disentangled structure and timbre codes."""

__version__ = "0.1.0"

from .kernels import backend as kernel_backend  # noqa: F401
