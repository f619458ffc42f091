"""Temporal-aware two-layer GPU inference scheduling simulator."""

__version__ = "0.1.0"
