"""Compute-elastic patch tokenization for transformer PDE surrogates."""

__version__ = "0.1.0"
