"""Desk-scale laboratory for joint magnitude/phase estimation in T-F vocoders."""
__version__ = "0.1.0"
