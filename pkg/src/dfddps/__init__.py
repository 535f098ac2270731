"""Coded-aperture depth from defocus with diffusion posterior sampling."""

__version__ = "0.1.0"
