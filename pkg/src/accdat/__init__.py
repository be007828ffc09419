"""Desk-scale CTC speech recognition with domain adversarial training."""

__version__ = "0.1.0"
