"""Bayesian reconstruction of privacy-perturbed census counts over nested areas."""

__version__ = "0.1.0"
