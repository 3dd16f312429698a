"""Filtering variational objectives for sequential latent-variable models."""

__version__ = "0.1.0"
