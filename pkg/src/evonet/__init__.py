"""Evolutionary search of convolutional denoisers for hyperspectral cubes."""

__version__ = "0.1.0"
