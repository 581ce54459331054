"""Semantic surface segmentation for spinning-Lidar scans."""

__version__ = "0.1.0"
