"""Normalized random measures built from interacting point processes."""
__version__ = "0.1.0"
