"""Differentiable channel selection attention with an information bottleneck bound."""

__version__ = "0.1.0"
