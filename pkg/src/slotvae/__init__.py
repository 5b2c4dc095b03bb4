"""Hierarchical VAE with slot attention on both the inference and
the generation path, plus procedural datasets and evaluation metrics."""

__version__ = "0.1.0"
