"""
Run tracking for lesionpipe.

Collects per-epoch metrics of training runs and per-stage timings of pipeline
runs. The epoch log (``epoch,mean_loss,train_accuracy``) is rendered without
timings so it stays byte-identical between runs; timings only go to the JSON
export.
"""

import json
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

TRAINING_LOG_HEADER = "epoch,mean_loss,train_accuracy"


@dataclass
class EpochRecord:
    """Metrics of one pass over the training set."""
    epoch: int
    mean_loss: float
    train_accuracy: float
    batches: int
    duration: float = 0.0

    def csv_line(self) -> str:
        return f"{self.epoch},{self.mean_loss:.6f},{self.train_accuracy:.6f}"


@dataclass
class TrainingRun:
    """Complete record of one model being trained."""
    task: int
    samples: int
    seed: int
    start_time: float
    end_time: Optional[float] = None
    total_duration: Optional[float] = None
    epochs: List[EpochRecord] = field(default_factory=list)
    status: str = "running"  # running, success, failed
    failure: Optional[str] = None

    def complete(self, success: bool = True, failure: Optional[str] = None):
        self.end_time = time.time()
        self.total_duration = self.end_time - self.start_time
        self.status = "success" if success else "failed"
        self.failure = failure

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.epochs[-1].train_accuracy if self.epochs else None

    @property
    def losses(self) -> List[float]:
        return [e.mean_loss for e in self.epochs]


@dataclass
class StageTiming:
    name: str
    duration: float
    detail: str = ""


class RunTracker:
    """
    Collects training runs and stage timings for one CLI invocation.

    Not a singleton: every command creates its own tracker and hands it to the
    stages it drives.
    """

    def __init__(self):
        self.current_run: Optional[TrainingRun] = None
        self.run_history: List[TrainingRun] = []
        self.stages: List[StageTiming] = []
        self._epoch_start: Optional[float] = None

    def start_run(self, task: int, samples: int, seed: int) -> TrainingRun:
        self.current_run = TrainingRun(task=task, samples=samples, seed=seed, start_time=time.time())
        return self.current_run

    def start_epoch(self):
        self._epoch_start = time.perf_counter()

    def record_epoch(self, epoch: int, mean_loss: float, train_accuracy: float, batches: int) -> EpochRecord:
        duration = time.perf_counter() - self._epoch_start if self._epoch_start is not None else 0.0
        record = EpochRecord(epoch, mean_loss, train_accuracy, batches, duration)
        if self.current_run is not None:
            self.current_run.epochs.append(record)
        self._epoch_start = None
        return record

    def complete_run(self, success: bool = True, failure: Optional[str] = None):
        if not self.current_run:
            return
        self.current_run.complete(success, failure)
        self.run_history.append(self.current_run)
        self.current_run = None

    def record_stage(self, name: str, duration: float, detail: str = ""):
        self.stages.append(StageTiming(name, duration, detail))

    def last_run(self) -> Optional[TrainingRun]:
        return self.current_run or (self.run_history[-1] if self.run_history else None)

    def training_log(self, run: Optional[TrainingRun] = None) -> str:
        """The epoch log as CSV text, header included."""
        run = run or self.last_run()
        lines = [TRAINING_LOG_HEADER]
        if run is not None:
            lines.extend(e.csv_line() for e in run.epochs)
        return "\n".join(lines) + "\n"

    def get_aggregate_stats(self) -> Dict[str, Any]:
        if not self.run_history:
            return {}
        finished = [r for r in self.run_history if r.status == "success"]
        epoch_times = [e.duration for r in self.run_history for e in r.epochs]
        return {
            "total_runs": len(self.run_history),
            "successful_runs": len(finished),
            "total_epochs": len(epoch_times),
            "avg_epoch_time": sum(epoch_times) / len(epoch_times) if epoch_times else 0.0,
            "final_losses": {r.task: r.losses[-1] for r in finished if r.epochs},
            "final_accuracies": {r.task: r.final_accuracy for r in finished if r.epochs},
        }

    def export_metrics(self, filepath: Union[str, Path]):
        """Export all runs and stage timings to a JSON file."""
        export_data = {
            "timestamp": datetime.now().isoformat(),
            "aggregate_stats": self.get_aggregate_stats(),
            "stages": [asdict(s) for s in self.stages],
            "run_history": [asdict(r) for r in self.run_history],
        }
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump(export_data, f, indent=2, default=str)
