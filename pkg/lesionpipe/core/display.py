"""
Console display for lesionpipe.

Everything here writes to the error stream through a rich Console, so stdout
carries only data (CSV logs, metrics lines, config dumps).
"""

from typing import Any, List, Optional, Sequence

import plotext as plt
from rich.box import SIMPLE
from rich.console import Console
from rich.table import Table
from rich.text import Text

from lesionpipe.core.errors import LesionPipeError
from lesionpipe.core.run_tracker import EpochRecord, TrainingRun


def _fmt(value: Optional[float]) -> str:
    return "NA" if value is None else f"{value:.6f}"


class PipelineDisplay:
    """
    Progress and diagnostics for pipeline stages.

    ``quiet`` silences progress; errors are always shown. ``verbose`` adds the
    structured error details.
    """

    def __init__(self, quiet: bool = False, verbose: bool = False, console: Optional[Console] = None):
        self.console = console or Console(stderr=True, highlight=False)
        self.quiet = quiet
        self.verbose = verbose

    def stage(self, name: str, detail: str = ""):
        if self.quiet:
            return
        text = Text()
        text.append(f"[{name}]", style="bold cyan")
        if detail:
            text.append(f" {detail}")
        self.console.print(text)

    def info(self, message: str):
        if not self.quiet:
            self.console.print(message, style="dim", markup=False)

    def warning(self, message: str):
        self.console.print(f"warning: {message}", style="yellow", markup=False)

    def epoch(self, task: int, record: EpochRecord, total: int):
        if self.quiet:
            return
        style = "green" if record.train_accuracy == 1.0 else "white"
        self.console.print(
            f"task {task} epoch {record.epoch}/{total}  loss {record.mean_loss:.6f}  "
            f"acc {record.train_accuracy:.3f}  ({record.duration:.2f}s)",
            style=style,
        )

    def error(self, err: Exception):
        if isinstance(err, LesionPipeError):
            self.console.print(f"error: {err.message}", style="bold red", markup=False)
            if self.verbose and err.details:
                for key, value in err.to_dict()["details"].items():
                    self.console.print(f"  {key}: {value}", style="red", markup=False)
        else:
            self.console.print(f"error: {err}", style="bold red", markup=False)

    def run_summary(self, run: TrainingRun):
        if self.quiet:
            return
        summary = Table(title=f"Task {run.task} training", box=SIMPLE, show_header=False)
        summary.add_column("Metric", style="cyan")
        summary.add_column("Value", style="bold")
        summary.add_row("Samples", str(run.samples))
        summary.add_row("Epochs", str(len(run.epochs)))
        if run.epochs:
            summary.add_row("Final loss", f"{run.epochs[-1].mean_loss:.6f}")
            summary.add_row("Final accuracy", f"{run.epochs[-1].train_accuracy:.3f}")
        summary.add_row("Duration", f"{run.total_duration or 0:.2f} seconds")
        summary.add_row("Status", run.status)
        self.console.print(summary)

    def metrics_table(self, rows: Sequence[Any]):
        """Rows are TaskMetrics (task, accuracy, auc); absent values show as NA."""
        if self.quiet:
            return
        table = Table(title="Evaluation", box=SIMPLE)
        table.add_column("Task", style="cyan")
        table.add_column("Accuracy", justify="right")
        table.add_column("AUC", justify="right")
        for row in rows:
            table.add_row(row.task, _fmt(row.accuracy), _fmt(row.auc))
        self.console.print(table)

    def loss_curve(self, losses: List[float], title: str = "mean loss per epoch"):
        """Terminal plot of the epoch losses."""
        if not losses:
            return
        plt.clear_figure()
        plt.plotsize(70, 18)
        plt.plot(list(range(1, len(losses) + 1)), list(losses), marker="dot")
        plt.title(title)
        plt.xlabel("epoch")
        self.console.print(Text.from_ansi(plt.build()))
