"""
Finite-difference verification of model_backward.

Every parameter of a tiny float64 model is perturbed by +/-h and the central
difference of the mean BCE loss is compared with the analytic gradient:

    rel = |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)

The probe sample is redrawn until no ReLU input and no max-pool runner-up lies
within KINK_MARGIN of switching, so a +/-h step cannot cross a kink. Weight
perturbations move activations too, so the margin is kept well above h.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from lesionpipe.core.prng import SplitMix64, derive_seed
from lesionpipe.nn import layers, model
from lesionpipe.nn.model import LayerSpec, Parameters

DEFAULT_GRADCHECK_ARCHITECTURE = "conv:2,relu,maxpool,fc:1"
DEFAULT_GRADCHECK_SIZE = 8
STEP = 1e-5
TOLERANCE = 1e-6
KINK_MARGIN = 1e-4
MAX_PROBE_DRAWS = 64


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_layer: Optional[int]
    worst_index: Optional[int]
    parameters_checked: int
    probe_draws: int
    # false when every draw sat near a kink and the last one was used anyway
    kink_free: bool = True

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _loss(spec: LayerSpec, params: Parameters, batch: np.ndarray, labels: np.ndarray) -> float:
    logits, _ = model.model_forward(spec, params, batch)
    return float(np.mean(layers.bce_with_logits(logits, labels)))


def _near_kink(spec: LayerSpec, params: Parameters, batch: np.ndarray) -> bool:
    _, cache = model.model_forward(spec, params, batch)
    for index, layer in enumerate(spec.layers):
        x = cache.inputs[index]
        if layer.kind == "relu" and np.any(np.abs(x) < KINK_MARGIN):
            return True
        if layer.kind == "maxpool":
            cells = np.sort(layers._pool_windows(x), axis=-1)
            # all-zero windows behind a ReLU stay tied under any small step
            close = (cells[..., -1] - cells[..., -2] < KINK_MARGIN) & (cells[..., -1] != 0)
            if np.any(close):
                return True
    return False


def _draw_probe(rng: SplitMix64, shape) -> np.ndarray:
    """Entries with magnitude in [0.5, 1) and random sign."""
    n = int(np.prod(shape))
    magnitude = rng.uniform_array(n, 0.5, 1.0)
    sign = np.where(rng.uniform_array(n, 0.0, 1.0) < 0.5, -1.0, 1.0)
    return (magnitude * sign).reshape(shape)


def grad_check_report(
    spec: Union[str, LayerSpec] = DEFAULT_GRADCHECK_ARCHITECTURE,
    seed: int = 0,
    size: int = DEFAULT_GRADCHECK_SIZE,
) -> GradCheckReport:
    if isinstance(spec, str):
        spec = LayerSpec.parse(spec)
    input_shape = (3, size, size)
    params = model.init_parameters(spec, input_shape, derive_seed(seed, 0), dtype=np.float64)
    rng = SplitMix64(derive_seed(seed, 1))
    labels = np.ones((1, 1), dtype=np.float64)

    draws = 0
    kink_free = False
    while not kink_free and draws < MAX_PROBE_DRAWS:
        draws += 1
        batch = _draw_probe(rng, (1,) + input_shape)
        kink_free = not _near_kink(spec, params, batch)

    logits, cache = model.model_forward(spec, params, batch)
    analytic = model.model_backward(spec, params, cache, layers.bce_grad(logits, labels))

    worst = 0.0
    worst_layer = worst_index = None
    checked = 0
    for index, p in params:
        for tensor, grad in ((p.weight, analytic[index].weight), (p.bias, analytic[index].bias)):
            flat = tensor.reshape(-1)
            flat_grad = grad.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + STEP
                plus = _loss(spec, params, batch, labels)
                flat[i] = original - STEP
                minus = _loss(spec, params, batch, labels)
                flat[i] = original
                numeric = (plus - minus) / (2 * STEP)
                a = float(flat_grad[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
                checked += 1
                if rel > worst:
                    worst, worst_layer, worst_index = rel, index, checked - 1
    return GradCheckReport(worst, worst_layer, worst_index, checked, draws, kink_free)


def grad_check(spec: Union[str, LayerSpec] = DEFAULT_GRADCHECK_ARCHITECTURE, seed: int = 0, size: int = DEFAULT_GRADCHECK_SIZE) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return grad_check_report(spec, seed, size).max_rel_error
