"""Diffusion-based instance feature augmentation for multiple-instance learning."""

__version__ = "0.1.0"
