"""
Evaluation of a prediction table against ground truth.

AUC is the Mann-Whitney statistic computed from midranks, which equals the
pairwise count ``(#concordant + 0.5 * #ties) / (#pos * #neg)`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from lesionpipe.core.errors import ManifestError
from lesionpipe.data.raster import DatasetManifest
from lesionpipe.predict.predictor import PredictionTable

METRICS_HEADER = "task,accuracy,auc"
THRESHOLD = 0.5


@dataclass(frozen=True)
class TaskMetrics:
    task: str
    accuracy: Optional[float]
    auc: Optional[float]

    def csv_line(self) -> str:
        return f"{self.task},{_fmt(self.accuracy)},{_fmt(self.auc)}"


def _fmt(value: Optional[float]) -> str:
    return "NA" if value is None else f"{value:.6f}"


def auc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """Area under the ROC curve, ties counted half; None when a class is empty."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) == 1
    n_pos = int(np.sum(y))
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return None
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    starts = np.cumsum(counts) - counts
    midranks = starts + (counts + 1) / 2.0
    rank_sum = float(np.sum(midranks[inverse.reshape(-1)][y]))
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def accuracy(scores: Sequence[float], labels: Sequence[int], threshold: float = THRESHOLD) -> Optional[float]:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        return None
    predicted = s >= threshold
    return float(np.mean(predicted == (np.asarray(labels) == 1)))


def evaluate(table: PredictionTable, truth: DatasetManifest) -> List[TaskMetrics]:
    """Rows for task1, task2 and their mean."""
    lookup = {e.image_id: e for e in truth}
    missing = [i for i in table.ids() if i not in lookup]
    if missing:
        raise ManifestError(f"image id {missing[0]!r} missing from ground truth", details={"missing": missing})
    labels1 = [lookup[i].melanoma for i in table.ids()]
    labels2 = [lookup[i].seborrheic_keratosis for i in table.ids()]

    rows = [
        TaskMetrics("task1", accuracy(table.scores(1), labels1), auc(table.scores(1), labels1)),
        TaskMetrics("task2", accuracy(table.scores(2), labels2), auc(table.scores(2), labels2)),
    ]
    accs = [r.accuracy for r in rows]
    aucs = [r.auc for r in rows]
    rows.append(
        TaskMetrics(
            "mean",
            None if None in accs else sum(accs) / 2.0,
            None if None in aucs else sum(aucs) / 2.0,
        )
    )
    return rows


def format_metrics(rows: Sequence[TaskMetrics]) -> str:
    return "\n".join([METRICS_HEADER] + [r.csv_line() for r in rows]) + "\n"
