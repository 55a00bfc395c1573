"""Numerical laboratory for input-to-output stability notions."""

__version__ = "0.1.0"
