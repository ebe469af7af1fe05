"""Beam-aware channel knowledge map generation with a latent diffusion transformer."""

__version__ = "0.1.0"
