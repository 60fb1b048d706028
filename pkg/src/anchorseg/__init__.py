"""Anchor-token guided zero-shot anomaly segmentation, desk scale."""

__version__ = "0.1.0"
