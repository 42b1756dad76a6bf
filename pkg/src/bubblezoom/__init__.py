"""Stabilized Q1 finite elements with recursively zoomed bubbles."""

__version__ = "0.1.0"
