"""Desk-scale VLA + diffusion-policy driving stack on synthetic corridor scenes."""

__version__ = "0.1.0"
