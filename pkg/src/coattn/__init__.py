"""Multihop co-attention visual-semantic embeddings for ranking ad statements."""

__version__ = "0.1.0"
