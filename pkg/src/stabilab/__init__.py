"""Spectral boundary-feedback stabilization of a cubic heat equation with multiplicative noise."""

__version__ = "0.1.0"
