"""Curvilinear slicing of functions with bounded generalized deformation."""

__version__ = "0.1.0"
