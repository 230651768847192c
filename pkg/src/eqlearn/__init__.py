"""Primal-dual learning under statistical equality and inequality constraints."""

__version__ = "0.1.0"
