"""Desk-scale lab for hierarchical (segment-level) preference optimization."""

__version__ = "0.1.0"
