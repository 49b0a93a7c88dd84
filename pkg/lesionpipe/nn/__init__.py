"""
CPU convolutional network: layer rules, model stack, SGD and gradient checking
"""

from .model import LayerSpec, Parameters, model_backward, model_forward, sgd_step

__all__ = ["LayerSpec", "Parameters", "model_backward", "model_forward", "sgd_step"]
