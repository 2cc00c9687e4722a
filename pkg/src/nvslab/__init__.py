"""Desk-scale conditional diffusion lab for single-image novel view synthesis."""

__version__ = "0.1.0"
