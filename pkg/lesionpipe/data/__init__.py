"""
Image data: PPM codec, manifest and crop-spec parsing, preprocessing and augmentation
"""

from .raster import CropSpec, DatasetManifest, Image, ImageDirectory, ManifestEntry
from .imageops import AffineTransform, AugmentPolicy, InputTensor

__all__ = [
    "CropSpec",
    "DatasetManifest",
    "Image",
    "ImageDirectory",
    "ManifestEntry",
    "AffineTransform",
    "AugmentPolicy",
    "InputTensor",
]
