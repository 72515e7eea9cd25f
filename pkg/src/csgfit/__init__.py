"""Fit CSG models of smoothed convex polytopes to depth images."""

__version__ = "0.1.0"
