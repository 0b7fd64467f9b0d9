"""Trap mapping and 3D co-localization from NV-cluster spectral diffusion."""

__version__ = "0.1.0"
