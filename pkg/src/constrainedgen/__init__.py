"""Constraint-guided sampling from score-based generative models."""

__version__ = "0.1.0"
