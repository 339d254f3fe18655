"""Timespace viscous fingering on anisotropically adapted tetrahedral meshes."""

__version__ = "0.1.0"
