"""
Binary checkpoint codec.

Layout, all integers little-endian:

    "LSNM"                 magic
    u32                    format version (1)
    u8                     task tag (1 = melanoma, 2 = seborrheic keratosis)
    u32 + UTF-8 bytes      descriptor "input_size=S;arch=...;seed=N;epochs=E"
    3 x f32                channel means
    per tensor             u32 rank, rank x u32 extents, f32 payload

Tensors follow layer index order, weight before bias. The tensor list is
implied by the descriptor, so a load checks every header against the shapes
the architecture demands.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from lesionpipe.core.errors import CheckpointError, LesionPipeError
from lesionpipe.nn.model import LayerParams, LayerSpec, Parameters

MAGIC = b"LSNM"
VERSION = 1
TASK_TAGS = (1, 2)


@dataclass(frozen=True, eq=False)
class ModelCheckpoint:
    task: int
    spec: LayerSpec
    input_size: int
    channel_means: Tuple[float, float, float]
    params: Parameters = field(repr=False)
    seed: int = 0
    epochs: int = 0

    def __post_init__(self):
        if self.task not in TASK_TAGS:
            raise CheckpointError(f"invalid task tag {self.task}", {"task": self.task})
        means = tuple(float(np.float32(m)) for m in self.channel_means)
        if len(means) != 3:
            raise CheckpointError(f"need 3 channel means, got {len(means)}")
        object.__setattr__(self, "channel_means", means)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (3, self.input_size, self.input_size)

    def descriptor(self) -> str:
        return f"input_size={self.input_size};arch={self.spec.descriptor()};seed={self.seed};epochs={self.epochs}"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        return (
            self.task == other.task
            and self.descriptor() == other.descriptor()
            and self.channel_means == other.channel_means
            and self.params.equals(other.params)
        )

    __hash__ = None  # type: ignore[assignment]


def _parse_descriptor(text: str) -> Dict[str, str]:
    fields_ = {}
    for part in text.split(";"):
        key, sep, value = part.partition("=")
        if not sep or key in fields_:
            raise CheckpointError(f"descriptor mismatch: bad field {part!r}", {"descriptor": text})
        fields_[key] = value
    if set(fields_) != {"input_size", "arch", "seed", "epochs"}:
        raise CheckpointError(f"descriptor mismatch: fields {sorted(fields_)}", {"descriptor": text})
    return fields_


def save_checkpoint(m: ModelCheckpoint) -> bytes:
    descriptor = m.descriptor().encode("utf-8")
    out = [
        MAGIC,
        struct.pack("<IB", VERSION, m.task),
        struct.pack("<I", len(descriptor)),
        descriptor,
        np.asarray(m.channel_means, dtype="<f4").tobytes(),
    ]
    for tensor in m.params.tensors():
        out.append(struct.pack("<I", tensor.ndim))
        out.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        out.append(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("unexpected end of checkpoint", {"offset": self.pos, "wanted": n})
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(data: bytes) -> ModelCheckpoint:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint")
    reader = _Reader(data)
    reader.take(4)
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", {"version": version})
    task = reader.take(1)[0]
    if task not in TASK_TAGS:
        raise CheckpointError(f"invalid task tag {task}", {"task": task})
    try:
        descriptor = reader.take(reader.u32()).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("descriptor mismatch: not valid UTF-8") from None
    fields_ = _parse_descriptor(descriptor)
    try:
        spec = LayerSpec.parse(fields_["arch"])
        input_size, seed, epochs = int(fields_["input_size"]), int(fields_["seed"]), int(fields_["epochs"])
        expected = spec.param_shapes((3, input_size, input_size))
    except (ValueError, LesionPipeError) as e:
        raise CheckpointError(f"descriptor mismatch: {e}", {"descriptor": descriptor}) from e
    means = np.frombuffer(reader.take(12), dtype="<f4")

    params = Parameters()
    for index, shapes in expected.items():
        tensors = []
        for shape in shapes:
            rank = reader.u32()
            extents = tuple(reader.u32() for _ in range(rank))
            if extents != shape:
                raise CheckpointError(
                    f"shape mismatch for layer {index}: stored {list(extents)}, architecture needs {list(shape)}",
                    {"layer": index},
                )
            count = int(np.prod(shape))
            payload = np.frombuffer(reader.take(4 * count), dtype="<f4")
            tensors.append(payload.astype(np.float32).reshape(shape))
        params.layers[index] = LayerParams(*tensors)
    if reader.pos != len(data):
        raise CheckpointError(f"trailing bytes after checkpoint ({len(data) - reader.pos})")
    return ModelCheckpoint(task, spec, input_size, tuple(float(v) for v in means), params, seed, epochs)


def write_checkpoint(path: Union[str, Path], m: ModelCheckpoint) -> None:
    Path(path).write_bytes(save_checkpoint(m))


def read_checkpoint(path: Union[str, Path]) -> ModelCheckpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}", {"path": str(path)}) from e
    return load_checkpoint(data)
