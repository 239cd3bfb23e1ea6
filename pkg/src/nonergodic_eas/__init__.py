"""Fully non-ergodic Fourier-amplitude ground-motion modelling."""

__version__ = "0.1.0"
