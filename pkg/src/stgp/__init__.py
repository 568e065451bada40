"""Continuous space-time Gaussian-process state estimation for continuum robots."""

__version__ = "0.1.0"
