"""Backbone feature extraction into FSEM embedding stores."""

__version__ = "0.1.0"
