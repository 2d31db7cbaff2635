"""Supervised contrastive continual learning with a kNN exemplar criterion."""

__version__ = "0.1.0"
