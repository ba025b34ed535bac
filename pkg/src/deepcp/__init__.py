"""Deep CP tensor factorization trained by gradient descent, with diagnostics."""

__version__ = "0.1.0"
