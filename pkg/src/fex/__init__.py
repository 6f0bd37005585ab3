"""Symbolic discovery of governing equations with finite expression trees."""

__version__ = "0.1.0"
