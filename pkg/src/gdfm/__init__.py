"""Streaming conversion-rate prediction with post-click actions as
generalized delayed feedback."""

__version__ = "0.1.0"
