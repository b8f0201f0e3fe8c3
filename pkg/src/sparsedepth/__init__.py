"""Sparse depth completion and segmentation toolkit on CPU."""

__version__ = "0.1.0"
