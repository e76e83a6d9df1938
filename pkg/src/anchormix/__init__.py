"""Anchored Bayesian Gaussian mixture models."""

__version__ = "0.1.0"
