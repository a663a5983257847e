"""Desk-scale lab for studying PINN forward/inverse training on RC low-pass filters."""

__version__ = "0.1.0"
