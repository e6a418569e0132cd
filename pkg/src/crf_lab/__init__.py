"""Numerical laboratory for Conformal Ricci Flow on the flat-chart torus."""

__version__ = "0.1.0"
