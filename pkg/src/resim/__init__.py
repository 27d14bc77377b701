"""Reconstruct LiDAR sequences into meshes and re-simulate them under other sensor profiles."""

__version__ = "0.1.0"
