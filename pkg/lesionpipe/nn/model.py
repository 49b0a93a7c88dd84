"""
The layer stack: architecture descriptors, parameter containers, whole-model
forward/backward and the momentum SGD update.

An architecture is written as a comma list, e.g.
``conv:8,relu,maxpool,conv:16,relu,maxpool,fc:1``. ``fc`` flattens a spatial
input implicitly. The last layer must be ``fc:1`` (a single logit).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from lesionpipe.core.errors import NonFiniteError, ShapeError
from lesionpipe.core.prng import SplitMix64
from lesionpipe.nn import layers

DEFAULT_ARCHITECTURE = "conv:8,relu,maxpool,conv:16,relu,maxpool,fc:1"

_KINDS_WITH_SIZE = ("conv", "fc")
_KINDS_PLAIN = ("relu", "maxpool")


@dataclass(frozen=True)
class Layer:
    kind: str
    size: int = 0  # conv out_channels / fc out_features

    def descriptor(self) -> str:
        return f"{self.kind}:{self.size}" if self.kind in _KINDS_WITH_SIZE else self.kind

    @property
    def has_params(self) -> bool:
        return self.kind in _KINDS_WITH_SIZE


@dataclass(frozen=True)
class LayerSpec:
    layers: Tuple[Layer, ...]

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        parsed: List[Layer] = []
        for index, token in enumerate(t.strip() for t in text.split(",")):
            kind, _, arg = token.partition(":")
            if kind in _KINDS_PLAIN and not arg:
                parsed.append(Layer(kind))
            elif kind in _KINDS_WITH_SIZE and arg.isdigit() and int(arg) >= 1:
                parsed.append(Layer(kind, int(arg)))
            else:
                raise ShapeError(f"layer {index}: bad layer descriptor {token!r}", {"layer": index})
        if not parsed or parsed[-1] != Layer("fc", 1):
            raise ShapeError("final layer must be fc:1 producing one logit")
        return cls(tuple(parsed))

    def descriptor(self) -> str:
        return ",".join(layer.descriptor() for layer in self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[Layer]:
        return iter(self.layers)

    def shapes(self, input_shape: Sequence[int]) -> List[Tuple[int, ...]]:
        """Per-sample activation shapes, input first; raises naming the failing layer."""
        shape = tuple(input_shape)
        out = [shape]
        for index, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ShapeError(f"layer {index}: conv needs a [C,H,W] input, got {list(shape)}", {"layer": index})
                shape = (layer.size, shape[1], shape[2])
            elif layer.kind == "maxpool":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ShapeError(
                        f"layer {index}: maxpool needs even spatial dims, got {list(shape)}", {"layer": index}
                    )
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif layer.kind == "fc":
                shape = (layer.size,)
            out.append(shape)
        return out

    def param_shapes(self, input_shape: Sequence[int]) -> Dict[int, Tuple[Tuple[int, ...], Tuple[int, ...]]]:
        shapes = self.shapes(input_shape)
        result = {}
        for index, layer in enumerate(self.layers):
            if layer.kind == "conv":
                result[index] = ((layer.size, shapes[index][0], layers.KERNEL, layers.KERNEL), (layer.size,))
            elif layer.kind == "fc":
                result[index] = ((layer.size, int(np.prod(shapes[index]))), (layer.size,))
        return result


@dataclass
class LayerParams:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class Parameters:
    """Weights and biases keyed by layer index. Gradients and velocities share this type."""

    layers: Dict[int, LayerParams] = field(default_factory=dict)

    def __iter__(self) -> Iterator[Tuple[int, LayerParams]]:
        return iter(sorted(self.layers.items()))

    def __getitem__(self, index: int) -> LayerParams:
        return self.layers[index]

    def tensors(self) -> List[np.ndarray]:
        """Flat list in checkpoint order: by layer index, weight before bias."""
        out = []
        for _, p in self:
            out.extend((p.weight, p.bias))
        return out

    def zeros_like(self) -> "Parameters":
        return Parameters({i: LayerParams(np.zeros_like(p.weight), np.zeros_like(p.bias)) for i, p in self})

    def same_shapes(self, other: "Parameters") -> bool:
        if sorted(self.layers) != sorted(other.layers):
            return False
        return all(
            p.weight.shape == other[i].weight.shape and p.bias.shape == other[i].bias.shape for i, p in self
        )

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())

    def equals(self, other: "Parameters") -> bool:
        return self.same_shapes(other) and all(
            np.array_equal(a, b) for a, b in zip(self.tensors(), other.tensors())
        )


def init_parameters(spec: LayerSpec, input_shape: Sequence[int], seed: int, dtype=np.float32) -> Parameters:
    """Glorot-uniform weights from SplitMix64, zero biases."""
    rng = SplitMix64(seed)
    params = Parameters()
    for index, (w_shape, b_shape) in spec.param_shapes(input_shape).items():
        if len(w_shape) == 4:
            fan_in = w_shape[1] * w_shape[2] * w_shape[3]
            fan_out = w_shape[0] * w_shape[2] * w_shape[3]
        else:
            fan_in, fan_out = w_shape[1], w_shape[0]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform_array(int(np.prod(w_shape)), -limit, limit).reshape(w_shape)
        params.layers[index] = LayerParams(weight.astype(dtype), np.zeros(b_shape, dtype=dtype))
    return params


@dataclass
class ForwardCache:
    descriptor: str
    batch_shape: Tuple[int, ...]
    inputs: List[np.ndarray]  # input to each layer
    argmax: Dict[int, np.ndarray]
    logits_shape: Tuple[int, ...] = ()


def model_forward(spec: LayerSpec, params: Parameters, batch: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """Logits [N, 1] for an [N, 3, S, S] batch, plus what backward needs."""
    spec.shapes(batch.shape[1:])
    x = batch
    cache = ForwardCache(spec.descriptor(), tuple(batch.shape), [], {})
    for index, layer in enumerate(spec.layers):
        cache.inputs.append(x)
        try:
            if layer.kind == "conv":
                x = layers.conv2d_forward(x, params[index].weight, params[index].bias)
            elif layer.kind == "relu":
                x = layers.relu_forward(x)
            elif layer.kind == "maxpool":
                x, cache.argmax[index] = layers.maxpool2_forward(x)
            elif layer.kind == "fc":
                x = layers.fc_forward(x.reshape(x.shape[0], -1), params[index].weight, params[index].bias)
        except (ShapeError, KeyError) as e:
            message = e.message if isinstance(e, ShapeError) else f"missing parameters for layer {index}"
            raise ShapeError(f"layer {index} ({layer.descriptor()}): {message}", {"layer": index}) from e
    cache.logits_shape = tuple(x.shape)
    return x, cache


def model_backward(spec: LayerSpec, params: Parameters, cache: ForwardCache, grad_logits: np.ndarray) -> Parameters:
    """Exact parameter gradients given d(loss)/d(logits)."""
    if cache.descriptor != spec.descriptor() or len(cache.inputs) != len(spec):
        raise ShapeError("stale forward cache: architecture does not match", {"cache": cache.descriptor})
    if tuple(grad_logits.shape) != cache.logits_shape:
        raise ShapeError(
            f"stale forward cache: logit gradient {grad_logits.shape} vs logits {cache.logits_shape}"
        )
    grads = Parameters()
    g = grad_logits
    for index in range(len(spec) - 1, -1, -1):
        layer = spec.layers[index]
        x = cache.inputs[index]
        if layer.kind == "fc":
            flat = x.reshape(x.shape[0], -1)
            gx, gw, gb = layers.fc_backward(g, flat, params[index].weight)
            grads.layers[index] = LayerParams(gw, gb)
            g = gx.reshape(x.shape)
        elif layer.kind == "conv":
            gx, gw, gb = layers.conv2d_backward(g, x, params[index].weight)
            grads.layers[index] = LayerParams(gw, gb)
            g = gx
        elif layer.kind == "relu":
            g = layers.relu_backward(g, x)
        elif layer.kind == "maxpool":
            g = layers.maxpool2_backward(g, cache.argmax[index])
    return grads


def sgd_step(
    params: Parameters,
    grads: Parameters,
    lr: float,
    momentum: float,
    velocity: Optional[Parameters] = None,
) -> Tuple[Parameters, Parameters]:
    """v <- momentum * v + grad; p <- p - lr * v. Returns new (params, velocity)."""
    if velocity is None:
        velocity = params.zeros_like()
    if not params.same_shapes(grads) or not params.same_shapes(velocity):
        raise ShapeError("gradient or velocity shapes do not match parameters")
    if not grads.all_finite():
        bad = [i for i, g in grads if not (np.all(np.isfinite(g.weight)) and np.all(np.isfinite(g.bias)))]
        raise NonFiniteError(f"non-finite gradient in layers {bad}", {"layers": bad})

    new_params = Parameters()
    new_velocity = Parameters()
    for index, p in params:
        g = grads[index]
        v = velocity[index]
        vw = momentum * v.weight + g.weight
        vb = momentum * v.bias + g.bias
        new_velocity.layers[index] = LayerParams(vw, vb)
        new_params.layers[index] = LayerParams(p.weight - lr * vw, p.bias - lr * vb)
    return new_params, new_velocity
