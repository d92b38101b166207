"""Desk-scale laboratory for DRL-guided model extraction against image classifiers."""

__version__ = "0.1.0"
