"""
Unit tests for task relabeling, training determinism and convergence, and the
parameter sweep.
"""

import random

import numpy as np
import pytest

from lesionpipe.core.config import PipelineConfig
from lesionpipe.core.errors import NonFiniteError, TrainingError, UsageError
from lesionpipe.core.run_tracker import RunTracker
from lesionpipe.data.imageops import AugmentPolicy
from lesionpipe.data.raster import DatasetManifest, ImageDirectory, ManifestEntry
from lesionpipe.nn.model import DEFAULT_ARCHITECTURE, LayerSpec, init_parameters
from lesionpipe.training.checkpoint import save_checkpoint
from lesionpipe.training.trainer import (
    Task,
    TaskLabeling,
    TrainConfig,
    expand_grid,
    labeling_for,
    relabel_dual,
    sweep,
    train,
)


def _labeling(rows, task=Task.MELANOMA):
    return TaskLabeling(task, {image_id: m for image_id, m, _ in rows})


def test_relabel_dual_on_random_manifest():
    """Task 1 is melanoma vs rest, task 2 keratosis vs rest, order preserved."""
    rng = random.Random(5)
    entries = []
    for i in range(100):
        kind = rng.choice(["mel", "sk", "nev"])
        entries.append(ManifestEntry(f"ISIC_{i:07d}", int(kind == "mel"), int(kind == "sk")))
    manifest = DatasetManifest(tuple(entries))
    task1, task2 = relabel_dual(manifest)
    assert task1.ids() == task2.ids() == manifest.ids()
    for e in manifest:
        assert task1.labels[e.image_id] == e.melanoma
        assert task2.labels[e.image_id] == e.seborrheic_keratosis
        if e.is_nevus:
            assert task1.labels[e.image_id] == task2.labels[e.image_id] == 0
    assert labeling_for(manifest, Task.KERATOSIS) == task2


def test_task_tags():
    assert Task.from_tag(1) is Task.MELANOMA
    assert Task.from_tag(2).label == "task2_keratosis"
    with pytest.raises(UsageError):
        Task.from_tag(3)


def test_train_config_from_pipeline_config():
    cfg = PipelineConfig(input_size=32, epochs=3, presets=("hflip",), seed=4)
    tc = TrainConfig.from_pipeline_config(cfg)
    assert tc.input_shape == (3, 32, 32)
    assert tc.spec == LayerSpec.parse(DEFAULT_ARCHITECTURE)
    assert tc.policy == AugmentPolicy.from_descriptors(["hflip"], 4)
    with pytest.raises(TrainingError):
        TrainConfig(input_size=32, spec=tc.spec, momentum=1.0)


def test_zero_learning_rate_keeps_initialization(two_class_images):
    """With lr 0 the trained weights are the seeded initialization."""
    directory, rows = two_class_images
    spec = LayerSpec.parse("conv:2,relu,maxpool,fc:1")
    config = TrainConfig(input_size=32, spec=spec, epochs=1, lr=0.0, seed=21)
    checkpoint = train(config, _labeling(rows), directory)
    assert checkpoint.params.equals(init_parameters(spec, (3, 32, 32), 21))


def test_training_is_deterministic(two_class_images):
    """Same seed and data give byte-identical checkpoints and logs, also with threads."""
    directory, rows = two_class_images
    spec = LayerSpec.parse("conv:4,relu,maxpool,fc:1")
    config = TrainConfig(input_size=32, spec=spec, epochs=3, batch_size=6, seed=8,
                         policy=AugmentPolicy.from_descriptors(["hflip", "rotate:-10~10"], 8))
    first_tracker, second_tracker = RunTracker(), RunTracker()
    first = train(config, _labeling(rows), directory, tracker=first_tracker)
    second = train(config, _labeling(rows), directory, tracker=second_tracker, jobs=4)
    assert save_checkpoint(first) == save_checkpoint(second)
    assert first_tracker.training_log() == second_tracker.training_log()
    assert first_tracker.last_run().samples == 60
    assert first.epochs == 3 and first.seed == 8


def test_training_log_format(two_class_images):
    directory, rows = two_class_images
    tracker = RunTracker()
    config = TrainConfig(input_size=32, spec=LayerSpec.parse("fc:1"), epochs=2, seed=1)
    train(config, _labeling(rows), directory, tracker=tracker)
    lines = tracker.training_log().splitlines()
    assert lines[0] == "epoch,mean_loss,train_accuracy"
    assert [line.split(",")[0] for line in lines[1:]] == ["1", "2"]
    assert all(len(line.split(",")[1].split(".")[1]) == 6 for line in lines[1:])
    assert tracker.last_run().status == "success"


def test_overfits_separable_disks(two_class_images):
    """Dark vs bright disks at 32x32 with the default architecture reach 100% training accuracy."""
    directory, rows = two_class_images
    cfg = PipelineConfig(input_size=32, epochs=200, seed=0)
    tracker = RunTracker()
    train(TrainConfig.from_pipeline_config(cfg), _labeling(rows), directory, tracker=tracker)
    run = tracker.last_run()
    assert run.final_accuracy == 1.0

    losses = run.losses
    second_half = losses[len(losses) // 2:]
    # never increases over the second half
    for epoch, (previous, current) in enumerate(zip(second_half, second_half[1:]), start=len(losses) // 2 + 2):
        assert current <= previous, f"loss rose at epoch {epoch}: {previous} -> {current}"
    assert second_half[-1] < 0.1


def test_mean_subtraction_can_be_disabled(two_class_images):
    directory, rows = two_class_images
    spec = LayerSpec.parse("fc:1")
    on = train(TrainConfig(input_size=32, spec=spec, epochs=1), _labeling(rows), directory)
    off = train(TrainConfig(input_size=32, spec=spec, epochs=1, mean_subtraction=False), _labeling(rows), directory)
    assert all(0.0 < m < 1.0 for m in on.channel_means)
    assert off.channel_means == (0.0, 0.0, 0.0)


def test_empty_dataset_is_rejected(tmp_path):
    config = TrainConfig(input_size=8, spec=LayerSpec.parse("fc:1"))
    with pytest.raises(TrainingError):
        train(config, TaskLabeling(Task.MELANOMA, {}), ImageDirectory(tmp_path))


def test_wrong_image_size_is_rejected(two_class_images):
    directory, rows = two_class_images
    config = TrainConfig(input_size=16, spec=LayerSpec.parse("fc:1"))
    with pytest.raises(TrainingError) as excinfo:
        train(config, _labeling(rows), directory)
    assert "preprocess" in excinfo.value.message


def test_divergence_reports_epoch_and_batch(two_class_images):
    """An absurd learning rate overflows and is reported, not silently saved."""
    directory, rows = two_class_images
    tracker = RunTracker()
    config = TrainConfig(input_size=32, spec=LayerSpec.parse("fc:1"), epochs=50, lr=1e38, momentum=0.0)
    with np.errstate(all="ignore"):
        with pytest.raises(NonFiniteError) as excinfo:
            train(config, _labeling(rows), directory, tracker=tracker)
    assert "epoch" in excinfo.value.details
    assert tracker.last_run().status == "failed"


def test_expand_grid_order():
    grid = {"lr": ["0.1", "0.01"], "epochs": ["1", "2"]}
    assert expand_grid(grid) == [
        {"lr": "0.1", "epochs": "1"},
        {"lr": "0.1", "epochs": "2"},
        {"lr": "0.01", "epochs": "1"},
        {"lr": "0.01", "epochs": "2"},
    ]


def test_sweep_ranks_by_validation_auc(two_class_images):
    directory, rows = two_class_images
    base = PipelineConfig(input_size=32, architecture="fc:1", epochs=2, batch_size=4)
    grid = {"lr": ["0.001", "0.01"], "seed": ["1", "2"]}
    results = sweep(base, grid, Task.MELANOMA, _labeling(rows[::2]), _labeling(rows[1::2]), directory)
    assert sorted(r.grid_index for r in results) == [0, 1, 2, 3]
    aucs = [r.auc for r in results]
    assert aucs == sorted(aucs, reverse=True)
    assert results[0].describe().startswith("lr=")
