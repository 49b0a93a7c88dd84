"""
End-to-end pipeline as a LangGraph StateGraph.

    preprocess -> augment -> train1 -> train2 -> predict -> [evaluate] -> END

PipelineState flows through every node. Nodes write their artifacts under the
work directory and append one record to ``steps``, an append-only audit log of
what ran, what it produced and how long it took.

Work directory layout::

    preprocessed/          normalized S x S images
    augmented/             originals + augmented copies, manifest.csv
    model1.ckpt model2.ckpt
    train1.log  train2.log
    submission.csv
    metrics.csv            only when ground truth is supplied
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, TypedDict

from langgraph.graph import END, StateGraph

from lesionpipe.core.config import PipelineConfig
from lesionpipe.core.display import PipelineDisplay
from lesionpipe.core.run_tracker import RunTracker
from lesionpipe.data.imageops import AugmentPolicy
from lesionpipe.data.raster import DatasetManifest, ImageDirectory
from lesionpipe.pipeline import stages
from lesionpipe.predict.metrics import TaskMetrics, evaluate, format_metrics
from lesionpipe.predict.predictor import CalibrationParams, PredictionTable, predict_dataset, write_submission
from lesionpipe.training.checkpoint import ModelCheckpoint
from lesionpipe.training.trainer import Task, TrainConfig, labeling_for


@dataclass(frozen=True)
class PipelinePaths:
    train_manifest: Path
    test_manifest: Path
    images: Path
    work: Path
    crops: Optional[Path] = None
    truth: Optional[Path] = None

    @property
    def preprocessed(self) -> Path:
        return self.work / "preprocessed"

    @property
    def augmented(self) -> Path:
        return self.work / "augmented"

    def model(self, task: int) -> Path:
        return self.work / f"model{task}.ckpt"

    def train_log(self, task: int) -> Path:
        return self.work / f"train{task}.log"

    @property
    def submission(self) -> Path:
        return self.work / "submission.csv"

    @property
    def metrics(self) -> Path:
        return self.work / "metrics.csv"


class PipelineState(TypedDict, total=False):
    """
    State shared by the pipeline nodes.

    steps is append-only: each node adds {"stage", "detail", "duration"}.
    """

    config: PipelineConfig
    paths: PipelinePaths
    steps: List[Dict[str, Any]]
    train: DatasetManifest
    test: DatasetManifest
    augmented: DatasetManifest
    checkpoints: Dict[int, ModelCheckpoint]
    table: Optional[PredictionTable]
    metrics: Optional[List[TaskMetrics]]
    done: bool


def _stage(name: str, tracker: RunTracker, display: PipelineDisplay):
    """Wrap a node body: time it, show it, record it in steps."""

    def decorator(body: Callable[[PipelineState], str]) -> Callable[[PipelineState], PipelineState]:
        def node(state: PipelineState) -> PipelineState:
            display.stage(name)
            start = time.perf_counter()
            detail = body(state)
            duration = time.perf_counter() - start
            tracker.record_stage(name, duration, detail)
            state.setdefault("steps", []).append({"stage": name, "detail": detail, "duration": duration})
            display.info(f"  {detail}")
            return state

        return node

    return decorator


def build_graph(tracker: RunTracker, display: PipelineDisplay, jobs: int = 1):
    """Build and return the compiled pipeline graph."""

    @_stage("preprocess", tracker, display)
    def preprocess_node(state: PipelineState) -> str:
        cfg, paths = state["config"], state["paths"]
        state["train"] = stages.read_manifest(paths.train_manifest)
        state["test"] = stages.read_manifest(paths.test_manifest)
        ids = list(dict.fromkeys(state["train"].ids() + state["test"].ids()))
        done = stages.preprocess_images(
            ImageDirectory(paths.images),
            ImageDirectory(paths.preprocessed),
            stages.read_crop_spec(paths.crops),
            cfg.input_size,
            ids,
            jobs,
        )
        return f"{len(done)} images normalized to {cfg.input_size}x{cfg.input_size}"

    @_stage("augment", tracker, display)
    def augment_node(state: PipelineState) -> str:
        cfg, paths = state["config"], state["paths"]
        policy = AugmentPolicy.from_descriptors(cfg.presets, cfg.seed)
        state["augmented"] = stages.augment_directory(
            state["train"], policy, ImageDirectory(paths.preprocessed), ImageDirectory(paths.augmented), jobs
        )
        return f"{len(state['train'])} -> {len(state['augmented'])} training entries"

    def _train(task: Task):
        @_stage(f"train{task.tag}", tracker, display)
        def train_node(state: PipelineState) -> str:
            cfg, paths = state["config"], state["paths"]
            # augmentation is already on disk
            config = TrainConfig.from_pipeline_config(replace(cfg, presets=()))
            checkpoint, _ = stages.train_to_file(
                config,
                labeling_for(state["augmented"], task),
                ImageDirectory(paths.augmented),
                paths.model(task.tag),
                log=paths.train_log(task.tag),
                tracker=tracker,
                display=display,
                jobs=jobs,
            )
            state.setdefault("checkpoints", {})[task.tag] = checkpoint
            run = tracker.last_run()
            return f"{task.label}: final loss {run.losses[-1]:.6f}, accuracy {run.final_accuracy:.3f}"

        return train_node

    @_stage("predict", tracker, display)
    def predict_node(state: PipelineState) -> str:
        cfg, paths = state["config"], state["paths"]
        table = predict_dataset(
            state["checkpoints"][1],
            state["checkpoints"][2],
            CalibrationParams(*cfg.calibration_values(1)),
            CalibrationParams(*cfg.calibration_values(2)),
            state["test"],
            ImageDirectory(paths.preprocessed),
            jobs,
        )
        stages.write_text(paths.submission, write_submission(table))
        state["table"] = table
        if state["paths"].truth is None:
            state["done"] = True
        return f"{len(table)} rows -> {paths.submission}"

    @_stage("evaluate", tracker, display)
    def evaluate_node(state: PipelineState) -> str:
        paths = state["paths"]
        rows = evaluate(state["table"], stages.read_manifest(paths.truth))
        stages.write_text(paths.metrics, format_metrics(rows))
        state["metrics"] = rows
        state["done"] = True
        return f"metrics -> {paths.metrics}"

    def _route_after_predict(state: PipelineState) -> str:
        return "end" if state.get("done") else "evaluate"

    graph = StateGraph(PipelineState)
    graph.add_node("preprocess", preprocess_node)
    graph.add_node("augment", augment_node)
    graph.add_node("train1", _train(Task.MELANOMA))
    graph.add_node("train2", _train(Task.KERATOSIS))
    graph.add_node("predict", predict_node)
    graph.add_node("evaluate", evaluate_node)

    graph.set_entry_point("preprocess")
    graph.add_edge("preprocess", "augment")
    graph.add_edge("augment", "train1")
    graph.add_edge("train1", "train2")
    graph.add_edge("train2", "predict")
    graph.add_conditional_edges("predict", _route_after_predict, {"end": END, "evaluate": "evaluate"})
    graph.add_edge("evaluate", END)
    return graph.compile()


def run_pipeline(
    config: PipelineConfig,
    paths: PipelinePaths,
    tracker: Optional[RunTracker] = None,
    display: Optional[PipelineDisplay] = None,
    jobs: int = 1,
) -> PipelineState:
    """Run every stage and return the final state."""
    tracker = tracker or RunTracker()
    display = display or PipelineDisplay(quiet=True)
    app = build_graph(tracker, display, jobs)
    initial: PipelineState = {
        "config": config,
        "paths": paths,
        "steps": [],
        "checkpoints": {},
        "table": None,
        "metrics": None,
        "done": False,
    }
    return app.invoke(initial, {"recursion_limit": 20})
