"""Radiance-field fitting with a learned RGBD patch diffusion prior."""

__version__ = "0.1.0"
