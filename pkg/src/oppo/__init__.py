"""Optimistic proximal policy optimization on tabular finite-horizon MDPs."""

__version__ = "0.1.0"
