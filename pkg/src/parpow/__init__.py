"""Parallel proof-of-work consensus laboratory."""

__version__ = "0.1.0"
