"""
Pipeline configuration.

Config files are flat ``key = value`` lines with ``#`` comments, read with
python-dotenv's statement parser so every rejected line can be reported by
number. Unknown or duplicate keys are errors; every value is parsed and
range-checked on load. ``dump_config`` writes all keys in canonical order and
reparses to an equal config.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple, Union

from dotenv.parser import parse_stream

from lesionpipe.core.errors import ConfigError, LesionPipeError
from lesionpipe.data.imageops import DEFAULT_INPUT_SIZE, parse_presets
from lesionpipe.nn.model import DEFAULT_ARCHITECTURE, LayerSpec

JOBS_ENV = "LESIONPIPE_JOBS"
MAX_SEED = (1 << 64) - 1

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


@dataclass(frozen=True)
class PipelineConfig:
    input_size: int = DEFAULT_INPUT_SIZE
    architecture: str = DEFAULT_ARCHITECTURE
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    presets: Tuple[str, ...] = ()
    mean_subtraction: bool = True
    task1_a: float = 1.0
    task1_b: float = 0.0
    task2_a: float = 1.0
    task2_b: float = 0.0

    def __post_init__(self):
        _validate(self)

    def layer_spec(self) -> LayerSpec:
        return LayerSpec.parse(self.architecture)

    def calibration_values(self, task: int) -> Tuple[float, float]:
        return (self.task1_a, self.task1_b) if task == 1 else (self.task2_a, self.task2_b)

    def with_overrides(self, overrides: Mapping[str, str]) -> "PipelineConfig":
        """New config with textual overrides, parsed exactly as file values are."""
        values: Dict[str, Any] = {}
        for key, text in overrides.items():
            if key not in _PARSERS:
                raise ConfigError(f"unknown key {key!r}", details={"key": key})
            values[key] = _parse_value(key, text, None)
        return replace(self, **values)


# -----------------------------
# Value parsing
# -----------------------------
def _int(text: str) -> int:
    return int(text.strip())


def _float(text: str) -> float:
    value = float(text.strip())
    if not math.isfinite(value):
        raise ValueError("not finite")
    return value


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError("expected true or false")


def _architecture(text: str) -> str:
    return LayerSpec.parse(text.strip()).descriptor()


def _presets(text: str) -> Tuple[str, ...]:
    return tuple(p.descriptor() for p in parse_presets(text))


_PARSERS: Dict[str, Callable[[str], Any]] = {
    "input_size": _int,
    "architecture": _architecture,
    "epochs": _int,
    "batch_size": _int,
    "lr": _float,
    "momentum": _float,
    "seed": _int,
    "presets": _presets,
    "mean_subtraction": _bool,
    "task1_a": _float,
    "task1_b": _float,
    "task2_a": _float,
    "task2_b": _float,
}


def _parse_value(key: str, text: str, line: Optional[int]) -> Any:
    try:
        return _PARSERS[key](text)
    except LesionPipeError as e:
        raise ConfigError(f"{key}: {e.message}", line=line, details={"key": key}) from e
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {text!r} ({e})", line=line, details={"key": key}) from e


def _validate(cfg: PipelineConfig) -> None:
    def check(ok: bool, key: str, rule: str):
        if not ok:
            raise ConfigError(f"{key} must be {rule}, got {getattr(cfg, key)!r}", details={"key": key})

    check(cfg.input_size >= 8, "input_size", ">= 8")
    check(cfg.epochs >= 1, "epochs", ">= 1")
    check(cfg.batch_size >= 1, "batch_size", ">= 1")
    check(cfg.lr > 0 and math.isfinite(cfg.lr), "lr", "> 0")
    check(0.0 <= cfg.momentum < 1.0, "momentum", "in [0, 1)")
    check(0 <= cfg.seed <= MAX_SEED, "seed", "in [0, 2^64)")
    check(cfg.task1_a > 0 and math.isfinite(cfg.task1_a), "task1_a", "> 0")
    check(cfg.task2_a > 0 and math.isfinite(cfg.task2_a), "task2_a", "> 0")
    check(math.isfinite(cfg.task1_b), "task1_b", "finite")
    check(math.isfinite(cfg.task2_b), "task2_b", "finite")
    try:
        LayerSpec.parse(cfg.architecture).shapes((3, cfg.input_size, cfg.input_size))
    except LesionPipeError as e:
        raise ConfigError(
            f"architecture does not fit input_size {cfg.input_size}: {e.message}", details={"key": "architecture"}
        ) from e


def _statement_line(original) -> int:
    # dotenv folds preceding blank lines into the statement
    body = original.string
    leading = body[: len(body) - len(body.lstrip())]
    return original.line + leading.count("\n")


def parse_config(text: str) -> PipelineConfig:
    values: Dict[str, Any] = {}
    for binding in parse_stream(io.StringIO(text)):
        line = _statement_line(binding.original)
        if binding.error:
            raise ConfigError(f"cannot parse statement {binding.original.string.strip()!r}", line=line)
        if binding.key is None:
            continue
        key = binding.key
        if key not in _PARSERS:
            raise ConfigError(f"unknown key {key!r}", line=line, details={"key": key})
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=line, details={"key": key})
        if binding.value is None:
            raise ConfigError(f"missing '=' after {key!r}", line=line, details={"key": key})
        values[key] = _parse_value(key, binding.value, line)
    return PipelineConfig(**values)


def load_config(path: Union[str, Path, None]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}", details={"path": str(path)}) from e
    return parse_config(text)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def dump_config(cfg: PipelineConfig) -> str:
    lines = ["# lesionpipe configuration"]
    for f in fields(cfg):
        lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def default_jobs() -> int:
    """``LESIONPIPE_JOBS`` from the environment (or .env), else 1."""
    raw = os.getenv(JOBS_ENV, "1")
    try:
        jobs = int(raw)
    except ValueError:
        raise ConfigError(f"{JOBS_ENV} must be an integer, got {raw!r}") from None
    return max(1, jobs)
