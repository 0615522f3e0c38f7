"""Utility-optimal scheduling of M2M traffic over aggregators and an application server."""

__version__ = "0.1.0"
