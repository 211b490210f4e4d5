"""Numerical laboratory for (p,2) almost-Grassmannian structures and their twistor theory."""

__version__ = "0.1.0"
