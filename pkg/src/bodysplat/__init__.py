"""Semantically labeled 3D Gaussian splatting for articulated bodies."""

__version__ = "0.1.0"
