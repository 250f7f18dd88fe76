"""Desk-scale mixture-of-experts decoder and training toolkit."""

__version__ = "0.1.0"
