"""Inference, calibration and evaluation."""
