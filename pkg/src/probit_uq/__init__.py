"""Uncertainty quantification for ridge-logistic classification of probit data."""

__version__ = "0.1.0"
