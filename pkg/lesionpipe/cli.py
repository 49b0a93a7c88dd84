"""
lesionpipe - command line interface.

Usage:
    lesionpipe preprocess --images DIR [--crops crops.csv] [--size 256] --out DIR
    lesionpipe augment --manifest m.csv --images DIR --presets hflip,vflip,scale:1.2,rotate:15 --seed S --out DIR
    lesionpipe train --task {1|2} [--config FILE] --manifest m.csv --images DIR --out FILE.ckpt [--log FILE]
    lesionpipe predict --model1 FILE --model2 FILE [--a1 F --b1 F --a2 F --b2 F] --manifest test.csv --images DIR --out submission.csv
    lesionpipe evaluate --pred submission.csv --truth m.csv
    lesionpipe gradcheck [--seed N]
    lesionpipe calibrate --task {1|2} --model FILE --manifest val.csv --images DIR
    lesionpipe sweep --task {1|2} [--config FILE] --manifest train.csv --val val.csv --images DIR --grid key=v1,v2
    lesionpipe pipeline [--config FILE] --train m.csv --test t.csv --images DIR [--crops crops.csv] --work DIR

Exit status: 0 on success, 1 on usage errors, 2 on data or validation errors.
Diagnostics go to stderr; data goes to files or stdout.
"""

import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from lesionpipe.core.config import PipelineConfig, default_jobs, dump_config, load_config
from lesionpipe.core.display import PipelineDisplay
from lesionpipe.core.errors import LesionPipeError, UsageError
from lesionpipe.core.run_tracker import RunTracker
from lesionpipe.data.imageops import DEFAULT_INPUT_SIZE, AugmentPolicy, parse_presets
from lesionpipe.data.raster import ImageDirectory
from lesionpipe.nn.gradcheck import (
    DEFAULT_GRADCHECK_ARCHITECTURE,
    DEFAULT_GRADCHECK_SIZE,
    TOLERANCE,
    grad_check_report,
)
from lesionpipe.pipeline import stages
from lesionpipe.pipeline.graph import PipelinePaths, run_pipeline
from lesionpipe.predict.metrics import evaluate, format_metrics
from lesionpipe.predict.predictor import (
    CalibrationParams,
    fit_calibration,
    parse_submission,
    predict_dataset,
    raw_scores,
    write_submission,
)
from lesionpipe.training.checkpoint import read_checkpoint
from lesionpipe.training.trainer import Task, TrainConfig, labeling_for, sweep

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

CONFIG_KEYS = [
    "input_size", "architecture", "epochs", "batch_size", "lr", "momentum", "seed",
    "presets", "mean_subtraction", "task1_a", "task1_b", "task2_a", "task2_b",
]


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(message, {"usage": self.format_usage().strip()})


def _key_value(text: str) -> List[str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return [key.strip(), value]


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _require(args: argparse.Namespace, *names: str):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required arguments: {', '.join(missing)}")


def _overrides(pairs: Optional[Sequence[List[str]]]) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    for key, value in pairs or []:
        if key not in CONFIG_KEYS:
            raise UsageError(f"unknown config key {key!r} in --set", {"key": key})
        overrides[key] = value
    return overrides


def _config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config)
    overrides = _overrides(getattr(args, "set", None))
    return cfg.with_overrides(overrides) if overrides else cfg


# -----------------------------
# Subcommand handlers
# -----------------------------
def cmd_preprocess(args, display: PipelineDisplay, tracker: RunTracker) -> int:
    display.stage("preprocess", f"{args.images} -> {args.out} at {args.size}x{args.size}")
    done = stages.preprocess_images(
        ImageDirectory(args.images),
        ImageDirectory(args.out),
        stages.read_crop_spec(args.crops),
        args.size,
        jobs=args.jobs,
    )
    display.info(f"{len(done)} images written")
    return EXIT_OK


def cmd_augment(args, display: PipelineDisplay, tracker: RunTracker) -> int:
    policy = AugmentPolicy(tuple(parse_presets(args.presets)), args.seed)
    manifest = stages.read_manifest(args.manifest)
    display.stage("augment", f"{len(manifest)} images x {len(policy.presets) + 1}")
    expanded = stages.augment_directory(
        manifest, policy, ImageDirectory(args.images), ImageDirectory(args.out), args.jobs
    )
    display.info(f"{len(expanded)} entries -> {Path(args.out) / stages.MANIFEST_NAME}")
    return EXIT_OK


def cmd_train(args, display: PipelineDisplay, tracker: RunTracker) -> int:
    cfg = _config(args)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    _require(args, "task", "manifest", "images", "out")
    task = Task.from_tag(args.task)
    labeling = labeling_for(stages.read_manifest(args.manifest), task)
    display.stage("train", f"{task.label}: {len(labeling)} images, {labeling.positives} positive")
    _, log_text = stages.train_to_file(
        TrainConfig.from_pipeline_config(cfg),
        labeling,
        ImageDirectory(args.images),
        args.out,
        log=args.log,
        tracker=tracker,
        display=display,
        jobs=args.jobs,
    )
    if args.log is None:
        sys.stdout.write(log_text)
    run = tracker.last_run()
    display.run_summary(run)
    if args.plot:
        display.loss_curve(run.losses, f"task {task.tag} mean loss per epoch")
    if args.metrics:
        tracker.export_metrics(args.metrics)
    return EXIT_OK


def _calibration(args, cfg: PipelineConfig, task: int) -> CalibrationParams:
    a, b = cfg.calibration_values(task)
    a = getattr(args, f"a{task}") if getattr(args, f"a{task}") is not None else a
    b = getattr(args, f"b{task}") if getattr(args, f"b{task}") is not None else b
    return CalibrationParams(a, b)


def cmd_predict(args, display: PipelineDisplay, tracker: RunTracker) -> int:
    cfg = load_config(args.config)
    manifest = stages.read_manifest(args.manifest)
    display.stage("predict", f"{len(manifest)} images")
    table = predict_dataset(
        read_checkpoint(args.model1),
        read_checkpoint(args.model2),
        _calibration(args, cfg, 1),
        _calibration(args, cfg, 2),
        manifest,
        ImageDirectory(args.images),
        args.jobs,
    )
    stages.write_text(args.out, write_submission(table))
    display.info(f"{len(table)} rows -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args, display: PipelineDisplay, tracker: RunTracker) -> int:
    table = parse_submission(stages.read_text(args.pred, "submission"))
    rows = evaluate(table, stages.read_manifest(args.truth))
    sys.stdout.write(format_metrics(rows))
    display.metrics_table(rows)
    return EXIT_OK


def cmd_gradcheck(args, display: PipelineDisplay, tracker: RunTracker) -> int:
    display.stage("gradcheck", f"{args.arch} at {args.size}x{args.size}, seed {args.seed}")
    report = grad_check_report(args.arch, args.seed, args.size)
    print(f"{report.max_rel_error:.6e}")
    display.info(f"{report.parameters_checked} parameters checked, {report.probe_draws} probe draw(s)")
    if not report.kink_free:
        display.warning(f"all {report.probe_draws} sample draws lay near a ReLU or max-pool kink; the last one was used")
    if not report.passed:
        display.error(
            LesionPipeError(
                f"max relative error {report.max_rel_error:.3e} exceeds {TOLERANCE:g} "
                f"(layer {report.worst_layer}, parameter {report.worst_index})"
            )
        )
        return EXIT_DATA
    return EXIT_OK


def cmd_calibrate(args, display: PipelineDisplay, tracker: RunTracker) -> int:
    checkpoint = read_checkpoint(args.model)
    task = Task.from_tag(args.task)
    if checkpoint.task != task.tag:
        raise UsageError(f"--model is a task {checkpoint.task} checkpoint but --task is {task.tag}")
    labeling = labeling_for(stages.read_manifest(args.manifest), task)
    ids = labeling.ids()
    raw = raw_scores(checkpoint, ids, ImageDirectory(args.images), args.jobs)
    params = fit_calibration(raw, [labeling.labels[i] for i in ids])
    print(f"{params.a!r},{params.b!r}")
    return EXIT_OK


def _grid(pairs: Sequence[List[str]]) -> Dict[str, List[str]]:
    grid: Dict[str, List[str]] = {}
    for key, values in pairs:
        if key not in CONFIG_KEYS:
            raise UsageError(f"unknown grid key {key!r}", {"key": key})
        if key in grid:
            raise UsageError(f"grid key {key!r} given twice", {"key": key})
        # preset lists contain commas themselves
        sep = ";" if key == "presets" else ","
        grid[key] = [v for v in values.split(sep)]
    return grid


def cmd_sweep(args, display: PipelineDisplay, tracker: RunTracker) -> int:
    cfg = _config(args)
    task = Task.from_tag(args.task)
    grid = _grid(args.grid)
    results = sweep(
        cfg,
        grid,
        task,
        labeling_for(stages.read_manifest(args.manifest), task),
        labeling_for(stages.read_manifest(args.val), task),
        ImageDirectory(args.images),
        ImageDirectory(args.val_images) if args.val_images else None,
        display=display,
        jobs=args.jobs,
    )
    lines = ["rank,overrides,auc,accuracy"]
    for rank, r in enumerate(results, 1):
        auc = "NA" if r.auc is None else f"{r.auc:.6f}"
        acc = "NA" if r.accuracy is None else f"{r.accuracy:.6f}"
        lines.append(f"{rank},{r.describe()},{auc},{acc}")
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_pipeline(args, display: PipelineDisplay, tracker: RunTracker) -> int:
    cfg = _config(args)
    if args.dump_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    _require(args, "train", "test", "images", "work")
    paths = PipelinePaths(
        train_manifest=Path(args.train),
        test_manifest=Path(args.test),
        images=Path(args.images),
        work=Path(args.work),
        crops=Path(args.crops) if args.crops else None,
        truth=Path(args.truth) if args.truth else None,
    )
    final = run_pipeline(cfg, paths, tracker=tracker, display=display, jobs=args.jobs)
    if final.get("metrics"):
        sys.stdout.write(format_metrics(final["metrics"]))
        display.metrics_table(final["metrics"])
    if args.metrics:
        tracker.export_metrics(args.metrics)
    return EXIT_OK


# -----------------------------
# Parser
# -----------------------------
def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--jobs", "-j", type=_positive_int, default=None,
                        help="worker threads for per-image work (default: $LESIONPIPE_JOBS or 1)")
    common.add_argument("--quiet", "-q", action="store_true", help="suppress progress output")
    common.add_argument("--verbose", "-v", action="store_true", help="show structured error details")

    parser = _Parser(
        prog="lesionpipe",
        description="Skin-lesion classification pipeline: preprocess, augment, train, predict, evaluate",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def add(name: str, handler: Callable, help_text: str) -> _Parser:
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(handler=handler)
        return p

    p = add("preprocess", cmd_preprocess, "crop and resize every image in a directory")
    p.add_argument("--images", required=True, help="directory of <id>.ppm source images")
    p.add_argument("--crops", help="crop spec CSV (image_id,x,y,width,height)")
    p.add_argument("--size", type=_positive_int, default=DEFAULT_INPUT_SIZE, help="output side length")
    p.add_argument("--out", required=True, help="output image directory")

    p = add("augment", cmd_augment, "materialize augmented copies and an expanded manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--presets", default="", help="comma list: hflip,vflip,scale:S,rotate:DEG (ranges as LO~HI)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory (images + manifest.csv)")

    def add_config(p: _Parser, dump: bool = True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", type=_key_value, metavar="KEY=VALUE",
                       help="override one config value (repeatable)")
        if dump:
            p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")

    p = add("train", cmd_train, "train one task model")
    p.add_argument("--task", type=int, choices=[1, 2])
    add_config(p)
    p.add_argument("--manifest")
    p.add_argument("--images")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--log", help="write the epoch log here instead of stdout")
    p.add_argument("--metrics", help="export run metrics as JSON")
    p.add_argument("--plot", action="store_true", help="plot the loss curve on stderr")

    p = add("predict", cmd_predict, "score test images with both task models")
    p.add_argument("--model1", required=True)
    p.add_argument("--model2", required=True)
    p.add_argument("--config", help="config file supplying task*_a / task*_b")
    for task in (1, 2):
        p.add_argument(f"--a{task}", type=float, default=None, help=f"task {task} calibration slope")
        p.add_argument(f"--b{task}", type=float, default=None, help=f"task {task} calibration midpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "accuracy and AUC of a submission against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)

    p = add("gradcheck", cmd_gradcheck, "verify backpropagation against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--arch", default=DEFAULT_GRADCHECK_ARCHITECTURE)
    p.add_argument("--size", type=_positive_int, default=DEFAULT_GRADCHECK_SIZE)

    p = add("calibrate", cmd_calibrate, "fit calibration a,b on held-out data")
    p.add_argument("--task", type=int, choices=[1, 2], required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", required=True)

    p = add("sweep", cmd_sweep, "train a parameter grid and rank by validation AUC")
    p.add_argument("--task", type=int, choices=[1, 2], required=True)
    add_config(p, dump=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--val-images", help="validation image directory (default: --images)")
    p.add_argument("--grid", action="append", type=_key_value, required=True, metavar="KEY=V1,V2",
                   help="values to try for one key (presets lists separated by ';')")

    p = add("pipeline", cmd_pipeline, "run every stage end to end")
    add_config(p)
    p.add_argument("--train")
    p.add_argument("--test")
    p.add_argument("--images")
    p.add_argument("--crops")
    p.add_argument("--work", help="work directory for all artifacts")
    p.add_argument("--truth", help="ground truth for the test set; adds an evaluate stage")
    p.add_argument("--metrics", help="export run metrics as JSON")
    return parser


def run(argv: Sequence[str]) -> int:
    """Run one command; returns the exit status."""
    parser = build_parser()
    display = PipelineDisplay(verbose="--verbose" in argv or "-v" in argv)
    if not argv:
        display.console.print(parser.format_help(), markup=False)
        return EXIT_USAGE
    try:
        args = parser.parse_args(list(argv))
    except UsageError as e:
        display.console.print(e.details.get("usage", parser.format_usage()).strip(), markup=False)
        display.error(e)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if args.command is None:
        display.console.print(parser.format_help(), markup=False)
        return EXIT_USAGE

    display = PipelineDisplay(quiet=args.quiet, verbose=args.verbose)
    if args.jobs is None:
        try:
            args.jobs = default_jobs()
        except LesionPipeError as e:
            display.error(e)
            return EXIT_USAGE
    tracker = RunTracker()
    try:
        return args.handler(args, display, tracker)
    except UsageError as e:
        display.error(e)
        return EXIT_USAGE
    except LesionPipeError as e:
        display.error(e)
        return EXIT_DATA
    except OSError as e:
        display.error(LesionPipeError(f"{e.strerror}: {e.filename}"))
        return EXIT_DATA


def main() -> None:
    load_dotenv()
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
