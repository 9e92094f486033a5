"""Autoregressive vision-to-coordinate-token contour extraction, desk scale."""

__version__ = "0.1.0"
