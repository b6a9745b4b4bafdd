"""Marker-based deformable-target tracking and closed-loop needle guidance."""

__version__ = "0.1.0"
