"""Synthetic driving scenarios, trajectory prediction models and their benchmark."""

__version__ = "0.1.0"
