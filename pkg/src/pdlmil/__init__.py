"""Attention-based multiple instance learning with progressive dropout."""

__version__ = "0.1.0"
