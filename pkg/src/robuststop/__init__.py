"""Robust optimal stopping on finite filtered probability spaces."""

__version__ = "0.1.0"
SCHEMA_VERSION = "1.0"
