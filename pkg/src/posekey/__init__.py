"""Pose-aware conditional image generation for dance keypostures."""

__version__ = "0.1.0"
