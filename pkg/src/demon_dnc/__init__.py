"""Differentiable neural computer with an MI-rewarded input demon."""

__version__ = "0.1.0"
