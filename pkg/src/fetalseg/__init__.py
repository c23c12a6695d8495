"""Partially supervised multi-class 3D brain MRI segmentation pipeline."""

__version__ = "0.1.0"

from .volume_io import LabelVolume, Volume3D

__all__ = ["LabelVolume", "Volume3D", "__version__"]
