"""Desk-scale multi-capability embodied navigation kit."""

__version__ = "0.1.0"
