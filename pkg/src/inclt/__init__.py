"""Incremental sequence encoders built on linear-attention transformers."""

__version__ = "0.1.0"
