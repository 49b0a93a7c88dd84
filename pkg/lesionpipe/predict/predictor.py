"""
Inference for both task models.

Raw scores are the network's single logit. Calibrated scores apply the
logistic conversion ``1 / (1 + exp(-a * (x - b)))`` with slope ``a > 0`` and
midpoint ``b``; ``b`` is the raw score that maps to exactly 0.5.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from lesionpipe.core.errors import CalibrationError, CheckpointError, ShapeError, SubmissionError
from lesionpipe.data.imageops import ImageSource, InputTensor, to_tensor
from lesionpipe.data.raster import MANIFEST_HEADER, DatasetManifest, Image, _check_header, _csv_rows
from lesionpipe.nn.model import model_forward
from lesionpipe.training.checkpoint import ModelCheckpoint

SUBMISSION_HEADER = MANIFEST_HEADER
SCORE_DECIMALS = 6
# printed scores stay inside the open interval at 6 decimals
PRINT_MIN = 0.000001
PRINT_MAX = 0.999999

_TINY = float(np.nextafter(0.0, 1.0))
_ALMOST_ONE = float(np.nextafter(1.0, 0.0))
_BELOW_HALF = float(np.nextafter(0.5, 0.0))

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> List[R]:
    """``map`` over a thread pool; results keep input order."""
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


# -----------------------------
# Calibration
# -----------------------------
@dataclass(frozen=True)
class CalibrationParams:
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise CalibrationError(f"calibration parameters must be finite, got a={self.a}, b={self.b}")
        if self.a <= 0:
            raise CalibrationError(f"calibration slope a must be positive, got {self.a}", {"a": self.a})


def calibrate(x: float, p: CalibrationParams) -> float:
    """Logistic score in (0, 1); exactly 0.5 at ``x == p.b``."""
    z = p.a * (x - p.b)
    if z >= 0:
        score = 1.0 / (1.0 + math.exp(-z))
    else:
        e = math.exp(z)
        score = e / (1.0 + e)
    if x < p.b:
        # below the midpoint must stay below 0.5 even when exp rounds to 1
        score = min(score, _BELOW_HALF)
    return min(max(score, _TINY), _ALMOST_ONE)


def fit_calibration(raw: Sequence[float], labels: Sequence[int], max_iter: int = 100) -> CalibrationParams:
    """Maximum-likelihood logistic fit with smoothed targets (Platt's method).

    Damped Newton on ``P = 1 / (1 + exp(A x + B))``; the result is returned as
    slope ``a = -A`` and midpoint ``b = -B / A``.
    """
    x = np.asarray(raw, dtype=np.float64)
    y = np.asarray(labels)
    if x.shape != y.shape or x.ndim != 1:
        raise CalibrationError(f"{x.size} scores but {y.size} labels")
    positives = float(np.sum(y == 1))
    negatives = float(y.size - positives)
    if positives == 0 or negatives == 0:
        raise CalibrationError("calibration needs both classes", {"positives": positives, "negatives": negatives})

    hi_target = (positives + 1) / (positives + 2)
    lo_target = 1 / (negatives + 2)
    t = np.where(y == 1, hi_target, lo_target)

    def probs(A: float, B: float) -> np.ndarray:
        f = A * x + B
        return np.exp(-np.logaddexp(0.0, f))

    def nll(A: float, B: float) -> float:
        f = A * x + B
        # -[t log p + (1 - t) log(1 - p)] with log p = -softplus(f)
        return float(np.sum(t * np.logaddexp(0.0, f) + (1 - t) * np.logaddexp(0.0, -f)))

    A, B = 0.0, math.log((negatives + 1) / (positives + 1))
    damping = 1e-3
    err = nll(A, B)
    for _ in range(max_iter):
        p = probs(A, B)
        d1 = p - t
        d2 = p * (1 - p)
        h11 = float(np.sum(x * x * d2))
        h22 = float(np.sum(d2))
        h21 = float(np.sum(x * d2))
        g1 = float(np.sum(x * d1))
        g2 = float(np.sum(d1))
        if abs(g1) < 1e-9 and abs(g2) < 1e-9:
            break
        while True:
            det = (h11 + damping) * (h22 + damping) - h21 * h21
            if det == 0:
                damping *= 10
                continue
            new_A = A + ((h22 + damping) * g1 - h21 * g2) / det
            new_B = B + ((h11 + damping) * g2 - h21 * g1) / det
            new_err = nll(new_A, new_B)
            if new_err < err * (1 + 1e-7):
                damping *= 0.1
                break
            damping *= 10
            if damping > 1e6:
                new_A, new_B, new_err = A, B, err
                break
        converged = abs(new_err - err) < 1e-12 * max(1.0, abs(err))
        A, B, err = new_A, new_B, new_err
        if converged:
            break

    if not A < 0:
        raise CalibrationError(f"fitted slope is not positive (a={-A})", {"a": -A, "b_intercept": B})
    return CalibrationParams(a=-A, b=-B / A)


# -----------------------------
# Raw scores
# -----------------------------
def prepare_input(checkpoint: ModelCheckpoint, img: Image) -> InputTensor:
    return to_tensor(img, checkpoint.channel_means, checkpoint.input_size)


def predict_raw(checkpoint: ModelCheckpoint, img: InputTensor) -> float:
    """The model's single output logit for one input."""
    if tuple(img.data.shape) != checkpoint.input_shape:
        raise ShapeError(
            f"input tensor {list(img.data.shape)} does not match model input {list(checkpoint.input_shape)}",
            {"expected": list(checkpoint.input_shape), "got": list(img.data.shape)},
        )
    logits, _ = model_forward(checkpoint.spec, checkpoint.params, img.data[None])
    return float(logits[0, 0])


def raw_scores(checkpoint: ModelCheckpoint, ids: Sequence[str], image_source: ImageSource, jobs: int = 1) -> List[float]:
    return ordered_map(lambda i: predict_raw(checkpoint, prepare_input(checkpoint, image_source(i))), list(ids), jobs)


# -----------------------------
# Prediction table and submission CSV
# -----------------------------
@dataclass(frozen=True)
class PredictionRow:
    image_id: str
    melanoma: float
    seborrheic_keratosis: float


@dataclass(frozen=True)
class PredictionTable:
    rows: Tuple[PredictionRow, ...] = ()

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if row.image_id in seen:
                raise SubmissionError(f"duplicate image_id {row.image_id!r}")
            seen.add(row.image_id)
            for score in (row.melanoma, row.seborrheic_keratosis):
                if not 0.0 < score < 1.0:
                    raise SubmissionError(f"score {score} for {row.image_id!r} outside (0, 1)")

    def __len__(self) -> int:
        return len(self.rows)

    def ids(self) -> List[str]:
        return [r.image_id for r in self.rows]

    def scores(self, task: int) -> List[float]:
        return [r.melanoma if task == 1 else r.seborrheic_keratosis for r in self.rows]


def _check_task(checkpoint: ModelCheckpoint, task: int, name: str):
    if checkpoint.task != task:
        raise CheckpointError(
            f"{name} is a task {checkpoint.task} checkpoint, expected task {task}",
            {"model": name, "task": checkpoint.task},
        )


def predict_dataset(
    ckpt1: ModelCheckpoint,
    ckpt2: ModelCheckpoint,
    params1: CalibrationParams,
    params2: CalibrationParams,
    manifest: DatasetManifest,
    image_source: ImageSource,
    jobs: int = 1,
) -> PredictionTable:
    """One row per manifest entry, in manifest order."""
    _check_task(ckpt1, 1, "model1")
    _check_task(ckpt2, 2, "model2")

    def _score(image_id: str) -> PredictionRow:
        img = image_source(image_id)
        x1 = predict_raw(ckpt1, prepare_input(ckpt1, img))
        x2 = predict_raw(ckpt2, prepare_input(ckpt2, img))
        return PredictionRow(image_id, calibrate(x1, params1), calibrate(x2, params2))

    return PredictionTable(tuple(ordered_map(_score, manifest.ids(), jobs)))


def format_score(score: float) -> str:
    return f"{min(max(score, PRINT_MIN), PRINT_MAX):.{SCORE_DECIMALS}f}"


def write_submission(table: PredictionTable) -> str:
    lines = [",".join(SUBMISSION_HEADER)]
    for row in table.rows:
        lines.append(f"{row.image_id},{format_score(row.melanoma)},{format_score(row.seborrheic_keratosis)}")
    return "\n".join(lines) + "\n"


def _parse_score(cell: str, column: str, line: int) -> float:
    try:
        value = float(cell.strip())
    except ValueError:
        raise SubmissionError(f"non-numeric {column} score {cell!r}", line=line) from None
    if not 0.0 < value < 1.0:
        raise SubmissionError(f"{column} score {value} outside (0, 1)", line=line)
    return value


def parse_submission(text: str) -> PredictionTable:
    rows_iter = _csv_rows(text)
    _check_header(rows_iter, SUBMISSION_HEADER, SubmissionError)
    rows: List[PredictionRow] = []
    seen = set()
    for line, cells in rows_iter:
        if len(cells) != len(SUBMISSION_HEADER):
            raise SubmissionError(f"expected {len(SUBMISSION_HEADER)} cells, got {len(cells)}", line=line)
        image_id = cells[0].strip()
        if not image_id or image_id in seen:
            raise SubmissionError(f"empty or duplicate image_id {image_id!r}", line=line)
        seen.add(image_id)
        rows.append(
            PredictionRow(
                image_id,
                _parse_score(cells[1], SUBMISSION_HEADER[1], line),
                _parse_score(cells[2], SUBMISSION_HEADER[2], line),
            )
        )
    return PredictionTable(tuple(rows))
