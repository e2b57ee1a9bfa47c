"""Bayesian (active) meta-learning for few-pilot demodulation and equalization."""

__version__ = "0.1.0"
