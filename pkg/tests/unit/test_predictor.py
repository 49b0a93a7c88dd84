"""
Unit tests for calibration, raw scoring, the submission format and evaluation
metrics.
"""

import math
import random

import numpy as np
import pytest

from lesionpipe.core.errors import CalibrationError, CheckpointError, ManifestError, ShapeError, SubmissionError
from lesionpipe.data.imageops import InputTensor
from lesionpipe.data.raster import DatasetManifest, Image, ManifestEntry
from lesionpipe.nn.model import LayerSpec, init_parameters, model_forward
from lesionpipe.predict.metrics import accuracy, auc, evaluate, format_metrics
from lesionpipe.predict.predictor import (
    CalibrationParams,
    PredictionRow,
    PredictionTable,
    calibrate,
    fit_calibration,
    format_score,
    ordered_map,
    parse_submission,
    predict_dataset,
    predict_raw,
    prepare_input,
    write_submission,
)
from lesionpipe.training.checkpoint import ModelCheckpoint


def _checkpoint(task: int, seed: int = 0, size: int = 8) -> ModelCheckpoint:
    spec = LayerSpec.parse("conv:2,relu,maxpool,fc:1")
    return ModelCheckpoint(task, spec, size, (0.5, 0.5, 0.5), init_parameters(spec, (3, size, size), seed), seed, 1)


def _image(seed: int, size: int = 8) -> Image:
    rng = np.random.default_rng(seed)
    return Image.from_array(rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8))


# -----------------------------
# Calibration
# -----------------------------
def test_calibrate_known_value():
    """a=2, b=0.5, x=1.5 gives 1 / (1 + e^-2)."""
    assert calibrate(1.5, CalibrationParams(2.0, 0.5)) == pytest.approx(0.880797, abs=1e-6)


def test_calibrate_midpoint_is_one_half():
    for b in (-3.0, 0.0, 0.7, 12.5):
        assert calibrate(b, CalibrationParams(3.0, b)) == 0.5


def test_calibrate_is_monotone_and_open_interval():
    p = CalibrationParams(1.3, -0.2)
    xs = np.linspace(-10, 10, 1000)
    scores = [calibrate(float(x), p) for x in xs]
    assert all(a < b for a, b in zip(scores, scores[1:]))
    assert 0.0 < calibrate(-1e6, p) < 1.0
    assert 0.0 < calibrate(1e6, p) < 1.0


def test_calibrate_just_below_midpoint_stays_below_one_half():
    p = CalibrationParams(1.0, 0.0)
    for x in (-1e-17, -5e-17, -1e-300):
        assert calibrate(x, p) < 0.5
    assert calibrate(0.0, p) == 0.5


def test_calibrated_threshold_agrees_with_raw_threshold():
    """score >= 0.5 exactly when x >= b, including offsets too small for exp to see."""
    rng = random.Random(31)
    for _ in range(2000):
        p = CalibrationParams(rng.uniform(0.01, 10.0), rng.uniform(-5.0, 5.0))
        x = p.b + rng.choice([-1.0, 1.0]) * rng.choice([rng.uniform(0.0, 10.0), 1e-17, 1e-12, 0.0])
        assert (calibrate(x, p) >= 0.5) == (x >= p.b)


@pytest.mark.parametrize("a, b", [(0.0, 0.0), (-1.0, 0.0), (1.0, float("nan")), (float("inf"), 0.0)])
def test_calibration_params_are_validated(a, b):
    with pytest.raises(CalibrationError):
        CalibrationParams(a, b)


def test_fit_calibration_recovers_a_logistic():
    """Labels drawn from a known logistic give a positive slope near its midpoint."""
    rng = np.random.default_rng(0)
    x = rng.uniform(-4, 6, size=4000)
    p = 1.0 / (1.0 + np.exp(-1.5 * (x - 1.0)))
    y = (rng.uniform(size=x.size) < p).astype(int)
    fitted = fit_calibration(x.tolist(), y.tolist())
    assert fitted.a == pytest.approx(1.5, rel=0.15)
    assert fitted.b == pytest.approx(1.0, abs=0.2)


def test_fit_calibration_errors():
    with pytest.raises(CalibrationError):
        fit_calibration([0.1, 0.2], [1, 1])
    with pytest.raises(CalibrationError):
        fit_calibration([0.1, 0.2, 0.3], [0, 1])
    with pytest.raises(CalibrationError):
        # scores anti-correlated with labels
        fit_calibration([3.0, 2.0, 1.0, 0.0], [0, 0, 1, 1])


# -----------------------------
# Raw scores
# -----------------------------
def test_predict_raw_matches_direct_forward():
    checkpoint = _checkpoint(1)
    img = _image(3)
    tensor = prepare_input(checkpoint, img)
    expected = (img.pixels.astype(np.float32) / np.float32(255.0) - np.float32(0.5)).transpose(2, 0, 1)
    assert np.array_equal(tensor.data, expected)
    logits, _ = model_forward(checkpoint.spec, checkpoint.params, expected[None])
    assert predict_raw(checkpoint, tensor) == float(logits[0, 0])


def test_predict_raw_rejects_wrong_shape():
    with pytest.raises(ShapeError):
        predict_raw(_checkpoint(1), InputTensor(np.zeros((3, 4, 4), dtype=np.float32)))
    with pytest.raises(ShapeError):
        prepare_input(_checkpoint(1), _image(0, size=6))


def test_predict_dataset_keeps_manifest_order():
    images = {f"img{i}": _image(i) for i in range(5)}
    manifest = DatasetManifest(tuple(ManifestEntry(f"img{i}", 0, 0) for i in (3, 0, 4, 1, 2)))
    table = predict_dataset(
        _checkpoint(1), _checkpoint(2, seed=1), CalibrationParams(), CalibrationParams(),
        manifest, images.__getitem__, jobs=3,
    )
    assert table.ids() == manifest.ids()
    assert all(0.0 < s < 1.0 for task in (1, 2) for s in table.scores(task))


def test_predict_dataset_with_zero_parameters_scores_one_half():
    spec = LayerSpec.parse("conv:2,relu,maxpool,fc:1")
    zeros = init_parameters(spec, (3, 8, 8), 0).zeros_like()
    ckpt1 = ModelCheckpoint(1, spec, 8, (0.5, 0.5, 0.5), zeros, 0, 1)
    ckpt2 = ModelCheckpoint(2, spec, 8, (0.5, 0.5, 0.5), zeros, 0, 1)
    images = {f"img{i}": _image(i) for i in range(4)}
    manifest = DatasetManifest(tuple(ManifestEntry(i, 0, 0) for i in images))
    table = predict_dataset(ckpt1, ckpt2, CalibrationParams(), CalibrationParams(), manifest, images.__getitem__)
    assert table.scores(1) == [0.5] * 4
    assert table.scores(2) == [0.5] * 4


def test_predict_dataset_checks_task_tags():
    manifest = DatasetManifest((ManifestEntry("img0", 0, 0),))
    with pytest.raises(CheckpointError):
        predict_dataset(_checkpoint(2), _checkpoint(2), CalibrationParams(), CalibrationParams(),
                        manifest, lambda i: _image(0))


def test_ordered_map_keeps_order():
    items = list(range(50))
    assert ordered_map(lambda v: v * v, items, jobs=8) == [v * v for v in items]


# -----------------------------
# Submission format
# -----------------------------
def test_submission_format():
    table = PredictionTable((
        PredictionRow("ISIC_0000000", 0.25, 0.5),
        PredictionRow("ISIC_0000001", 1e-12, 1 - 1e-12),
    ))
    text = write_submission(table)
    assert text == (
        "image_id,melanoma,seborrheic_keratosis\n"
        "ISIC_0000000,0.250000,0.500000\n"
        "ISIC_0000001,0.000001,0.999999\n"
    )
    parsed = parse_submission(text)
    assert parsed.ids() == table.ids()
    assert parsed.scores(1) == [0.25, 0.000001]


def test_format_score_stays_inside_open_interval():
    assert format_score(0.9999999) == "0.999999"
    assert format_score(0.0000001) == "0.000001"
    assert format_score(0.1234565) in ("0.123456", "0.123457")


@pytest.mark.parametrize(
    "body, line",
    [
        ("a,0.5,1.0\n", 2),
        ("a,0.5,0.5\na,0.1,0.1\n", 3),
        ("a,high,0.5\n", 2),
        ("a,0.5\n", 2),
    ],
)
def test_parse_submission_errors(body, line):
    with pytest.raises(SubmissionError) as excinfo:
        parse_submission("image_id,melanoma,seborrheic_keratosis\n" + body)
    assert excinfo.value.line == line


def test_prediction_table_rejects_closed_interval_scores():
    with pytest.raises(SubmissionError):
        PredictionTable((PredictionRow("a", 0.0, 0.5),))


# -----------------------------
# Metrics
# -----------------------------
def _pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_auc_matches_pairwise_count_on_random_tables():
    """50 random tables, half of them tie-heavy, agree exactly with the pairwise count."""
    rng = random.Random(17)
    for trial in range(50):
        n = rng.randint(2, 200)
        labels = [rng.randint(0, 1) for _ in range(n)]
        labels[0], labels[1] = 0, 1
        if trial % 2:
            scores = [rng.choice([0.1, 0.2, 0.3, 0.4]) for _ in range(n)]
        else:
            scores = [rng.random() for _ in range(n)]
        assert auc(scores, labels) == _pairwise_auc(scores, labels)


def test_auc_properties():
    labels = [0, 0, 1, 1, 0, 1]
    scores = [0.1, 0.4, 0.35, 0.8, 0.2, 0.9]
    base = auc(scores, labels)
    # invariant under strictly increasing transforms
    assert auc([math.exp(5 * s) for s in scores], labels) == base
    assert auc([1.0 - s for s in scores], labels) == pytest.approx(1.0 - base)
    assert auc(scores, [0] * 6) is None
    assert auc([0.5] * 6, labels) == 0.5


def test_auc_unchanged_by_calibration():
    rng = random.Random(23)
    for _ in range(50):
        n = rng.randint(2, 120)
        labels = [rng.randint(0, 1) for _ in range(n)]
        labels[0], labels[1] = 0, 1
        raw = [round(rng.uniform(-3.0, 3.0), 2) for _ in range(n)]
        p = CalibrationParams(rng.uniform(0.2, 3.0), rng.uniform(-1.0, 1.0))
        assert auc([calibrate(x, p) for x in raw], labels) == auc(raw, labels)


def test_accuracy_thresholds_at_one_half():
    assert accuracy([0.5, 0.49, 0.9, 0.1], [1, 0, 1, 1]) == 0.75
    assert accuracy([], []) is None


def _table(rows):
    return PredictionTable(tuple(PredictionRow(i, m, k) for i, m, k in rows))


def test_evaluate_rows_and_format():
    table = _table([("a", 0.9, 0.2), ("b", 0.2, 0.7), ("c", 0.4, 0.4), ("d", 0.6, 0.1)])
    truth = DatasetManifest((
        ManifestEntry("a", 1, 0), ManifestEntry("b", 0, 1), ManifestEntry("c", 0, 0), ManifestEntry("d", 0, 0),
    ))
    rows = evaluate(table, truth)
    assert [r.task for r in rows] == ["task1", "task2", "mean"]
    assert rows[0].auc == 1.0 and rows[0].accuracy == 0.75
    assert rows[1].auc == 1.0 and rows[1].accuracy == 1.0
    assert rows[2].auc == 1.0 and rows[2].accuracy == 0.875
    assert format_metrics(rows) == (
        "task,accuracy,auc\n"
        "task1,0.750000,1.000000\n"
        "task2,1.000000,1.000000\n"
        "mean,0.875000,1.000000\n"
    )


def test_evaluate_reports_na_for_single_class():
    table = _table([("a", 0.9, 0.2), ("b", 0.2, 0.7)])
    truth = DatasetManifest((ManifestEntry("a", 1, 0), ManifestEntry("b", 1, 0)))
    rows = evaluate(table, truth)
    assert rows[0].auc is None and rows[1].auc is None
    assert rows[2].csv_line() == "mean,0.500000,NA"


def test_evaluate_requires_truth_for_every_id():
    table = _table([("a", 0.9, 0.2), ("zz", 0.2, 0.7)])
    with pytest.raises(ManifestError):
        evaluate(table, DatasetManifest((ManifestEntry("a", 1, 0),)))
