"""Collusion deterrence for multi-server private information retrieval."""

__version__ = "0.1.0"
