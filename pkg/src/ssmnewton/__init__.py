"""Newton-type maximum-likelihood estimation for state-space models."""

__version__ = "0.1.0"
