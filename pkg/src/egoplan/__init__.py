"""Decoupled ego/environment world models and gradient-based planning for highway driving."""

__version__ = "0.1.0"
