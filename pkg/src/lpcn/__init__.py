"""Lossless-pooling convolutional networks for single-image super-resolution, in numpy."""

__version__ = "0.1.0"
