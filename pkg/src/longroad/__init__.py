"""Desk-scale lab for long-horizon video world models."""

__version__ = "0.1.0"
