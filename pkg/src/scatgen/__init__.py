"""LiDAR-to-scatterer grid generation with a frozen transformer backbone."""

__version__ = "0.1.0"
