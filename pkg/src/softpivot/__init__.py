"""Differentiable pivot cascades: two seq2seq models joined by a soft bridge."""

__version__ = "0.1.0"
