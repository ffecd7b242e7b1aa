"""Multimodal crack detection with a Bayesian conditional tensor factorization classifier."""

__version__ = "0.1.0"
