"""Conditional flow-matching fusion of coarse and fine multispectral rasters."""

__version__ = "0.1.0"
