"""Desk-scale any-to-any singing voice conversion with latent diffusion."""

__version__ = "0.1.0"
