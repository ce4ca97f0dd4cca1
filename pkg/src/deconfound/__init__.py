"""Nuisance-invariant classifier training and confounding diagnostics."""

__version__ = "0.1.0"
