"""Rotation-invariant spherical convolutions on 3D point clouds."""

__version__ = "0.1.0"
