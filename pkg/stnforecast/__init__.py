"""Spatiotemporal grid traffic forecasting with dual-path STN models."""

__version__ = "1.0.0"
