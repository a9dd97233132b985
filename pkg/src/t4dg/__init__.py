"""Desk-scale 4D generation and feedforward Gaussian reconstruction toolkit."""

__version__ = "0.1.0"
