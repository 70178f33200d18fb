"""Learnable spherical-harmonic textures on triangle meshes with a software renderer."""

__version__ = "0.1.0"
