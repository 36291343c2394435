"""Magnification-aware self-distillation for tiled slide pyramids."""

__version__ = "0.1.0"
