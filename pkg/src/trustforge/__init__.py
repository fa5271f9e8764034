"""Desk-scale trustworthy deep learning: autodiff, attacks, explanations, fair GANs."""

__version__ = "0.1.0"
