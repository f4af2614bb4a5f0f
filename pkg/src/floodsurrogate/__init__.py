"""Raster flood solver, CNN depth surrogate and evaluation metrics."""

__version__ = "0.1.0"
