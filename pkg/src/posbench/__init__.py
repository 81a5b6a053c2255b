"""Positional-bias probes and desk-scale contrastive training for text embedding models."""

__version__ = "0.1.0"
