"""
Training orchestration for the two binary task models.

The ground-truth manifest is relabeled twice: task 1 separates melanoma from
everything else, task 2 separates seborrheic keratosis from everything else.
Each task model is trained from a seeded random initialization with minibatch
SGD; every epoch reshuffles with ``seed ^ epoch`` so a run is reproducible
byte for byte.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from lesionpipe.core.config import PipelineConfig
from lesionpipe.core.display import PipelineDisplay
from lesionpipe.core.errors import LesionPipeError, NonFiniteError, TrainingError, UsageError
from lesionpipe.core.prng import SplitMix64
from lesionpipe.core.run_tracker import RunTracker
from lesionpipe.data.imageops import (
    AugmentPolicy,
    ImageSource,
    apply_affine,
    augmented_id,
    compute_channel_means,
    pixels_to_batch,
)
from lesionpipe.data.raster import DatasetManifest, Image
from lesionpipe.nn import layers
from lesionpipe.nn.model import LayerSpec, init_parameters, model_backward, model_forward, sgd_step
from lesionpipe.predict import metrics
from lesionpipe.predict.predictor import CalibrationParams, calibrate, ordered_map, raw_scores
from lesionpipe.training.checkpoint import ModelCheckpoint


class Task(Enum):
    MELANOMA = 1
    KERATOSIS = 2

    @property
    def tag(self) -> int:
        return self.value

    @property
    def label(self) -> str:
        return "task1_melanoma" if self is Task.MELANOMA else "task2_keratosis"

    @classmethod
    def from_tag(cls, tag: int) -> "Task":
        try:
            return cls(int(tag))
        except ValueError:
            raise UsageError(f"task must be 1 or 2, got {tag}") from None


@dataclass(frozen=True)
class TaskLabeling:
    """Binary labels for one task, keyed by image id in manifest order."""
    task: Task
    labels: Dict[str, int] = field(default_factory=dict)

    def ids(self) -> List[str]:
        return list(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def positives(self) -> int:
        return sum(self.labels.values())


def relabel_dual(manifest: DatasetManifest) -> Tuple[TaskLabeling, TaskLabeling]:
    task1 = TaskLabeling(Task.MELANOMA, {e.image_id: e.melanoma for e in manifest})
    task2 = TaskLabeling(Task.KERATOSIS, {e.image_id: e.seborrheic_keratosis for e in manifest})
    return task1, task2


def labeling_for(manifest: DatasetManifest, task: Task) -> TaskLabeling:
    return relabel_dual(manifest)[task.value - 1]


@dataclass(frozen=True)
class TrainConfig:
    input_size: int
    spec: LayerSpec
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    mean_subtraction: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        # lr == 0 is allowed: a frozen-weights run reproduces the initialization
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise TrainingError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainingError(f"momentum must be in [0, 1), got {self.momentum}")
        self.spec.shapes(self.input_shape)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (3, self.input_size, self.input_size)

    @classmethod
    def from_pipeline_config(cls, cfg: PipelineConfig) -> "TrainConfig":
        return cls(
            input_size=cfg.input_size,
            spec=cfg.layer_spec(),
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            momentum=cfg.momentum,
            seed=cfg.seed,
            policy=AugmentPolicy.from_descriptors(cfg.presets, cfg.seed),
            mean_subtraction=cfg.mean_subtraction,
        )


def _training_set(
    config: TrainConfig, labeling: TaskLabeling, image_source: ImageSource, jobs: int
) -> Tuple[List[str], List[Image], np.ndarray]:
    """Images and labels, with in-memory augmented copies after each original."""
    ids = labeling.ids()
    originals = ordered_map(image_source, ids, jobs)
    all_ids: List[str] = []
    images: List[Image] = []
    labels: List[int] = []
    for index, (image_id, img) in enumerate(zip(ids, originals)):
        if img.width != config.input_size or img.height != config.input_size:
            raise TrainingError(
                f"image {image_id!r} is {img.width}x{img.height}, expected {config.input_size}x{config.input_size}; "
                "run preprocess first",
                {"image_id": image_id},
            )
        all_ids.append(image_id)
        images.append(img)
        labels.append(labeling.labels[image_id])
        for k in range(len(config.policy.presets)):
            t = config.policy.transform_for(k, index, img.width, img.height)
            all_ids.append(augmented_id(image_id, k))
            images.append(apply_affine(img, t))
            labels.append(labeling.labels[image_id])
    return all_ids, images, np.asarray(labels, dtype=np.float32).reshape(-1, 1)


def train(
    config: TrainConfig,
    labeling: TaskLabeling,
    image_source: ImageSource,
    tracker: Optional[RunTracker] = None,
    display: Optional[PipelineDisplay] = None,
    jobs: int = 1,
) -> ModelCheckpoint:
    """Train one task model; epoch metrics go to ``tracker``."""
    if len(labeling) == 0:
        raise TrainingError("empty dataset: nothing to train on")
    tracker = tracker or RunTracker()
    ids, images, labels = _training_set(config, labeling, image_source, jobs)

    if config.mean_subtraction:
        means = tuple(float(np.float32(m)) for m in compute_channel_means(images))
    else:
        means = (0.0, 0.0, 0.0)
    pixels = np.stack([img.pixels for img in images])
    del images

    params = init_parameters(config.spec, config.input_shape, config.seed)
    velocity = None
    n = len(ids)
    tracker.start_run(labeling.task.tag, n, config.seed)

    try:
        for epoch in range(1, config.epochs + 1):
            tracker.start_epoch()
            order = SplitMix64(config.seed ^ epoch).shuffled(list(range(n)))
            loss_sum = 0.0
            correct = 0
            batches = 0
            for start in range(0, n, config.batch_size):
                batches += 1
                index = np.asarray(order[start:start + config.batch_size])
                x, y = pixels_to_batch(pixels[index], means), labels[index]
                logits, cache = model_forward(config.spec, params, x)
                loss = float(np.mean(layers.bce_with_logits(logits, y), dtype=np.float64))
                if not math.isfinite(loss):
                    raise NonFiniteError(
                        f"non-finite loss at epoch {epoch} batch {batches}",
                        {"epoch": epoch, "batch": batches, "ids": [ids[i] for i in index]},
                    )
                grads = model_backward(config.spec, params, cache, layers.bce_grad(logits, y))
                try:
                    params, velocity = sgd_step(params, grads, config.lr, config.momentum, velocity)
                except NonFiniteError as e:
                    raise NonFiniteError(
                        f"{e.message} at epoch {epoch} batch {batches}",
                        {**e.details, "epoch": epoch, "batch": batches},
                    ) from e
                loss_sum += loss * len(index)
                correct += int(np.sum((logits >= 0) == (y == 1)))
            record = tracker.record_epoch(epoch, loss_sum / n, correct / n, batches)
            if display is not None:
                display.epoch(labeling.task.tag, record, config.epochs)
    except LesionPipeError as e:
        tracker.complete_run(success=False, failure=e.message)
        raise
    tracker.complete_run(success=True)

    return ModelCheckpoint(
        task=labeling.task.tag,
        spec=config.spec,
        input_size=config.input_size,
        channel_means=means,
        params=params,
        seed=config.seed,
        epochs=config.epochs,
    )


# -----------------------------
# Parameter sweep
# -----------------------------
@dataclass(frozen=True)
class SweepResult:
    overrides: Dict[str, str]
    auc: Optional[float]
    accuracy: Optional[float]
    grid_index: int

    def describe(self) -> str:
        return ";".join(f"{k}={v}" for k, v in self.overrides.items())


def expand_grid(grid: Mapping[str, Sequence[str]]) -> List[Dict[str, str]]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def sweep(
    base: PipelineConfig,
    grid: Mapping[str, Sequence[str]],
    task: Task,
    train_labeling: TaskLabeling,
    val_labeling: TaskLabeling,
    image_source: ImageSource,
    val_source: Optional[ImageSource] = None,
    display: Optional[PipelineDisplay] = None,
    jobs: int = 1,
) -> List[SweepResult]:
    """Train every grid combination from scratch and rank by validation AUC.

    Results are sorted by AUC descending (absent AUC last), ties kept in grid
    order.
    """
    val_source = val_source or image_source
    combos = expand_grid(grid)
    configs = [base.with_overrides(c) for c in combos]
    val_ids = val_labeling.ids()
    val_labels = [val_labeling.labels[i] for i in val_ids]

    results = []
    for index, (overrides, cfg) in enumerate(zip(combos, configs)):
        if display is not None:
            display.stage("sweep", f"{index + 1}/{len(combos)} {overrides}")
        checkpoint = train(TrainConfig.from_pipeline_config(cfg), train_labeling, image_source, jobs=jobs)
        raw = raw_scores(checkpoint, val_ids, val_source, jobs)
        params = CalibrationParams(*cfg.calibration_values(task.tag))
        scores = [calibrate(x, params) for x in raw]
        results.append(
            SweepResult(overrides, metrics.auc(raw, val_labels), metrics.accuracy(scores, val_labels), index)
        )
    return sorted(results, key=lambda r: (r.auc is None, -(r.auc or 0.0), r.grid_index))
