"""Continuous normalizing flows on Grassmann manifolds."""

__version__ = "0.1.0"
