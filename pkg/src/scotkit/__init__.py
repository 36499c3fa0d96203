"""Scoring and tracking of multi-temporal building footprints (SCOT metric)."""

__version__ = "0.1.0"
