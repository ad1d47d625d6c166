"""Deep evolutionary face alignment with 3D diffusion heat maps, in numpy."""

__version__ = "0.1.0"
