"""Adaptive feature learning: diagonal and index-model gradient flows with
feature-error diagnostics."""

__version__ = "0.1.0"
