"""Randomized-weight adversarial training with Taylor-expanded noise terms."""

__version__ = "0.1.0"
