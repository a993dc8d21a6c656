"""Sequence-level adversarial garment textures against person detectors."""

__version__ = "0.1.0"
