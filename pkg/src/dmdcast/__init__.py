"""Residual DMD forecasting toolkit for gridded anomaly fields."""

__version__ = "0.1.0"
