"""Regularized latent dynamics prediction for zero-shot RL, at desk scale."""

__version__ = "0.1.0"
