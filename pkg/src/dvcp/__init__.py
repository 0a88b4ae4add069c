"""Learned inter-frame video codec with perceptual (LSGAN + feature) training."""

__version__ = "0.1.0"
