"""Latent-space visual servoing for sequential box packing with in-hand views."""

__version__ = "0.1.0"
