"""Continuous U-Net denoisers for diffusion models, with a discrete U-Net baseline."""

__version__ = "0.1.0"
