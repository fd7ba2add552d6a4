"""
fpm_singleshot package init.

Fourier ptychographic microscopy: forward model, iterative reconstruction,
and jointly trained single-shot illumination patterns.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
