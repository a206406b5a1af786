"""Grouped codec language modeling on a synthetic codec world."""

__version__ = "0.1.0"
