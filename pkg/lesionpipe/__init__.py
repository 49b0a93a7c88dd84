"""
lesionpipe: skin-lesion classification pipeline.

Preprocesses dermoscopic images (crop, size normalization, affine
augmentation), trains two binary convolutional classifiers from scratch on the
CPU and writes calibrated melanoma / seborrheic keratosis scores.
"""

__version__ = "1.0.0"
__author__ = "lesionpipe developers"
