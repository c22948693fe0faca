"""Dilated residual convolutional pitch estimation on raw audio, in numpy."""

__version__ = "0.1.0"
