"""Unsupervised anomaly detection and categorization in layered retinal scans."""

__version__ = "0.1.0"
