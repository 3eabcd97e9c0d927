"""Spatial-pyramid multi-stream CNN classifier in numpy."""

__version__ = "0.1.0"
