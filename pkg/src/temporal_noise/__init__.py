"""Sequence classification under time-varying label noise."""

__version__ = "0.1.0"
