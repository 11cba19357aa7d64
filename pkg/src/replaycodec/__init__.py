"""Continual-learning learned image codec with backward-compatible bitstreams."""

__version__ = "0.1.0"
