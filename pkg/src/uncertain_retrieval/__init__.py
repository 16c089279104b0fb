"""Uncertainty-regularized contrastive training for multi-grained composed retrieval."""

__version__ = "0.1.0"
