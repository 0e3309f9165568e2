"""Data-free convolutional generators for the inviscid Burgers equation, trained data-parallel."""

__version__ = "0.1.0"
