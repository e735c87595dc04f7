"""Semantic-guided self-supervised depth estimation laboratory."""

__version__ = "0.1.0"
