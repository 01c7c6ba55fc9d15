"""Counterfactual-probability diagnostics for binary classifiers."""

__version__ = "0.1.0"
