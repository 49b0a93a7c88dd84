"""
End-to-end workflow: preprocess -> augment -> train both tasks -> predict on an
eight-image toy set.

Two pipeline runs with the same seed must produce byte-identical checkpoints
and submissions, and running the stages one by one through the CLI must
produce the same bytes as the pipeline command.
"""

from lesionpipe.cli import run

ARTIFACTS = ("model1.ckpt", "model2.ckpt", "submission.csv", "train1.log", "train2.log")


def _config(root, text):
    path = root / "toy.cfg"
    path.write_text(text, encoding="utf-8")
    return str(path)


def _pipeline(toy_dataset, config, work):
    return run([
        "pipeline", "--config", config,
        "--train", str(toy_dataset["train"]), "--test", str(toy_dataset["test"]),
        "--images", str(toy_dataset["raw"].root), "--crops", str(toy_dataset["crops"]),
        "--work", str(work), "-q",
    ])


def test_pipeline_runs_are_byte_identical(toy_dataset, tiny_config_text):
    """Same seed, same inputs: every artifact matches byte for byte."""
    root = toy_dataset["root"]
    config = _config(root, tiny_config_text)
    assert _pipeline(toy_dataset, config, root / "run_a") == 0
    assert _pipeline(toy_dataset, config, root / "run_b") == 0

    for name in ARTIFACTS:
        assert (root / "run_a" / name).read_bytes() == (root / "run_b" / name).read_bytes(), name

    lines = (root / "run_a" / "submission.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "image_id,melanoma,seborrheic_keratosis"
    assert len(lines) == 9
    for line in lines[1:]:
        _, melanoma, keratosis = line.split(",")
        assert 0.0 < float(melanoma) < 1.0
        assert 0.0 < float(keratosis) < 1.0
        assert len(melanoma.split(".")[1]) == 6


def test_seed_changes_the_models(toy_dataset, tiny_config_text):
    root = toy_dataset["root"]
    assert _pipeline(toy_dataset, _config(root, tiny_config_text), root / "seed42") == 0
    assert _pipeline(toy_dataset, _config(root, tiny_config_text.replace("seed = 42", "seed = 43")), root / "seed43") == 0
    assert (root / "seed42" / "model1.ckpt").read_bytes() != (root / "seed43" / "model1.ckpt").read_bytes()


def test_stage_commands_match_pipeline(toy_dataset, tiny_config_text):
    """Running each stage as its own command reproduces the pipeline's bytes."""
    root = toy_dataset["root"]
    config = _config(root, tiny_config_text)
    assert _pipeline(toy_dataset, config, root / "piped") == 0

    staged = root / "staged"
    assert run([
        "preprocess", "--images", str(toy_dataset["raw"].root), "--crops", str(toy_dataset["crops"]),
        "--size", "16", "--out", str(staged / "preprocessed"), "-q",
    ]) == 0
    assert run([
        "augment", "--manifest", str(toy_dataset["train"]), "--images", str(staged / "preprocessed"),
        "--presets", "hflip", "--seed", "42", "--out", str(staged / "augmented"), "-q",
    ]) == 0
    for task in ("1", "2"):
        # augmented copies are already on disk
        assert run([
            "train", "--task", task, "--config", config, "--set", "presets=",
            "--manifest", str(staged / "augmented" / "manifest.csv"), "--images", str(staged / "augmented"),
            "--out", str(staged / f"model{task}.ckpt"), "--log", str(staged / f"train{task}.log"), "-q",
        ]) == 0
    assert run([
        "predict", "--model1", str(staged / "model1.ckpt"), "--model2", str(staged / "model2.ckpt"),
        "--config", config, "--manifest", str(toy_dataset["test"]), "--images", str(staged / "preprocessed"),
        "--out", str(staged / "submission.csv"), "-q",
    ]) == 0

    for name in ARTIFACTS:
        assert (root / "piped" / name).read_bytes() == (staged / name).read_bytes(), name
