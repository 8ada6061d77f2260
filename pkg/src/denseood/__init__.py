"""Desk-scale laboratory for dense out-of-distribution detection."""

__version__ = "0.1.0"
