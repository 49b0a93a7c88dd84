"""
Forward and backward rules for the layer kinds the classifier uses.

Tensors are numpy arrays in NCHW layout. All functions keep the dtype of their
inputs: float32 for training and inference, float64 for gradient checking.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lesionpipe.core.errors import ShapeError

KERNEL = 3
POOL = 2


def _require(cond: bool, message: str, **details) -> None:
    if not cond:
        raise ShapeError(message, details)


# -----------------------------
# Convolution: 3x3, stride 1, zero same-padding
# -----------------------------
def _windows(x: np.ndarray) -> np.ndarray:
    """[N, C, H, W] -> [N, C, H, W, 3, 3] views over the zero-padded input."""
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(padded, (KERNEL, KERNEL), axis=(2, 3))


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    _require(x.ndim == 4, f"conv input must be [N,C,H,W], got shape {x.shape}")
    _require(
        weights.ndim == 4 and weights.shape[1:] == (x.shape[1], KERNEL, KERNEL),
        f"conv weights {weights.shape} do not match input channels {x.shape[1]}",
    )
    _require(bias.shape == (weights.shape[0],), f"conv bias {bias.shape} does not match {weights.shape[0]} filters")
    out = np.tensordot(_windows(x), weights, axes=([1, 4, 5], [1, 2, 3]))  # [N, H, W, K]
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_input, grad_weights, grad_bias)."""
    _require(
        grad_out.shape == (x.shape[0], weights.shape[0], x.shape[2], x.shape[3]),
        f"conv output gradient {grad_out.shape} does not match forward shapes",
    )
    grad_w = np.tensordot(grad_out, _windows(x), axes=([0, 2, 3], [0, 2, 3]))  # [K, C, 3, 3]
    grad_b = grad_out.sum(axis=(0, 2, 3))
    flipped = weights[:, :, ::-1, ::-1]
    grad_x = np.tensordot(_windows(grad_out), flipped, axes=([1, 4, 5], [0, 2, 3]))  # [N, H, W, C]
    grad_x = grad_x.transpose(0, 3, 1, 2)
    return (
        np.ascontiguousarray(grad_x, dtype=x.dtype),
        np.ascontiguousarray(grad_w, dtype=weights.dtype),
        grad_b.astype(weights.dtype),
    )


# -----------------------------
# Max pooling: 2x2, stride 2
# -----------------------------
def _pool_windows(x: np.ndarray) -> np.ndarray:
    """[N, C, H, W] -> [N, C, H/2, W/2, 4] with window cells in row-major order."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h // POOL, POOL, w // POOL, POOL).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // POOL, w // POOL, POOL * POOL
    )


def maxpool2_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (pooled, argmax) where argmax is the winning cell 0..3 of each window.

    Ties go to the first cell in row-major order.
    """
    _require(x.ndim == 4, f"maxpool input must be [N,C,H,W], got shape {x.shape}")
    _require(
        x.shape[2] % POOL == 0 and x.shape[3] % POOL == 0,
        f"maxpool needs even spatial dims, got {x.shape[2]}x{x.shape[3]}",
    )
    windows = _pool_windows(x)
    argmax = np.argmax(windows, axis=-1)
    pooled = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(pooled), argmax


def maxpool2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    _require(grad_out.shape == argmax.shape, f"maxpool gradient {grad_out.shape} does not match argmax {argmax.shape}")
    n, c, h2, w2 = grad_out.shape
    cells = np.zeros((n, c, h2, w2, POOL * POOL), dtype=grad_out.dtype)
    np.put_along_axis(cells, argmax[..., None], grad_out[..., None], axis=-1)
    grad_x = cells.reshape(n, c, h2, w2, POOL, POOL).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(grad_x.reshape(n, c, h2 * POOL, w2 * POOL))


# -----------------------------
# ReLU
# -----------------------------
def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


# -----------------------------
# Fully connected
# -----------------------------
def fc_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    _require(x.ndim == 2, f"fc input must be [N,F], got shape {x.shape}")
    _require(
        weights.ndim == 2 and weights.shape[1] == x.shape[1],
        f"fc weights {weights.shape} do not match {x.shape[1]} input features",
    )
    _require(bias.shape == (weights.shape[0],), f"fc bias {bias.shape} does not match {weights.shape[0]} outputs")
    return (x @ weights.T + bias).astype(x.dtype, copy=False)


def fc_backward(
    grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_input, grad_weights, grad_bias)."""
    _require(
        grad_out.shape == (x.shape[0], weights.shape[0]),
        f"fc output gradient {grad_out.shape} does not match forward shapes",
    )
    return grad_out @ weights, grad_out.T @ x, grad_out.sum(axis=0)


# -----------------------------
# Loss
# -----------------------------
def sigmoid(z):
    return np.exp(-np.logaddexp(0, -z))


def bce_with_logits(logit, label):
    """Binary cross-entropy on a raw logit, in the overflow-free softplus form."""
    z = np.asarray(logit)
    y = np.asarray(label, dtype=z.dtype if z.dtype.kind == "f" else np.float64)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(loss) if loss.ndim == 0 else loss


def bce_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean BCE)/d(logits) for a [N, 1] batch."""
    n = logits.shape[0]
    return ((sigmoid(logits) - labels) / n).astype(logits.dtype, copy=False)
