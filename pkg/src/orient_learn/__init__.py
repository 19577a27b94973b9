"""Learned canonical orientations for feature points."""

__version__ = "0.1.0"
