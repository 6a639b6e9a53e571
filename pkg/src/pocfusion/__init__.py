"""Desk-scale sentence fusion with correspondence-aware attention masking."""

__version__ = "0.1.0"
