"""Attention-derived novelty search: shared embedding spaces for inference and curiosity."""

__version__ = "0.1.0"
