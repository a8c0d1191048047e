"""Symbolic models and controller synthesis for incrementally stable stochastic systems."""

__version__ = "0.1.0"
