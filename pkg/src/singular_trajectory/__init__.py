"""Pedestrian trajectory prediction across five task settings in one low-rank motion space."""

__version__ = "0.1.0"
