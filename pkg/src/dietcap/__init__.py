"""Dietary image captioning and food volume estimation toolkit."""

__version__ = "0.1.0"
