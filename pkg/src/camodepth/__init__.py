"""Adversarial camouflage textures against monocular depth estimation."""

__version__ = "0.1.0"
