"""Adversarial domain-label data augmentation on a small numpy autodiff engine."""

__version__ = "0.1.0"
