"""Homogenized diffusion coefficients of spherical-inclusion composites."""

__version__ = "0.1.0"
