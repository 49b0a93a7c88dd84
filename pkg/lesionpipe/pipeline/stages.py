"""
Disk-level pipeline stages.

Each stage reads its inputs from files, writes its outputs to files and returns
what the next stage needs. The CLI subcommands and the pipeline graph call the
same functions, so both produce the same bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

from lesionpipe.core.display import PipelineDisplay
from lesionpipe.core.errors import LesionPipeError, ManifestError
from lesionpipe.core.run_tracker import RunTracker
from lesionpipe.data.imageops import AugmentPolicy, augment_dataset, normalize_size
from lesionpipe.data.raster import (
    CropSpec,
    DatasetManifest,
    ImageDirectory,
    dump_manifest,
    load_crop_spec,
    load_manifest,
)
from lesionpipe.predict.predictor import ordered_map
from lesionpipe.training.checkpoint import ModelCheckpoint, write_checkpoint
from lesionpipe.training.trainer import TaskLabeling, TrainConfig, train

MANIFEST_NAME = "manifest.csv"

PathLike = Union[str, Path]


def read_text(path: PathLike, what: str) -> str:
    path = Path(path)
    try:
        return path.read_text(encoding="utf-8")
    except OSError as e:
        raise LesionPipeError(f"cannot read {what} {path}: {e.strerror}", {"path": str(path)}) from e


def read_manifest(path: PathLike) -> DatasetManifest:
    try:
        return load_manifest(read_text(path, "manifest"))
    except ManifestError as e:
        raise ManifestError(f"{path}: {e.message}", details=e.details) from e


def read_crop_spec(path: Optional[PathLike]) -> CropSpec:
    return CropSpec() if path is None else load_crop_spec(read_text(path, "crop spec"))


def write_text(path: PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def preprocess_images(
    source: ImageDirectory,
    target: ImageDirectory,
    crops: CropSpec,
    size: int,
    ids: Optional[Sequence[str]] = None,
    jobs: int = 1,
) -> List[str]:
    """Crop (crop-spec rect or centered square) and resize every image to ``size``."""
    ids = list(ids) if ids is not None else source.ids()

    def _one(image_id: str) -> str:
        img = normalize_size(source(image_id), size, crops.get(image_id), image_id)
        target.write(image_id, img)
        return image_id

    return ordered_map(_one, ids, jobs)


def augment_directory(
    manifest: DatasetManifest,
    policy: AugmentPolicy,
    source: ImageDirectory,
    target: ImageDirectory,
    jobs: int = 1,
) -> DatasetManifest:
    """Write originals plus augmented copies to ``target`` and its manifest.csv."""
    expanded, generated = augment_dataset(manifest, policy, source, jobs=jobs)
    for entry in expanded:
        img = generated.get(entry.image_id)
        target.write(entry.image_id, img if img is not None else source(entry.image_id))
    write_text(target.root / MANIFEST_NAME, dump_manifest(expanded))
    return expanded


def train_to_file(
    config: TrainConfig,
    labeling: TaskLabeling,
    source: ImageDirectory,
    out: PathLike,
    log: Optional[PathLike] = None,
    tracker: Optional[RunTracker] = None,
    display: Optional[PipelineDisplay] = None,
    jobs: int = 1,
) -> Tuple[ModelCheckpoint, str]:
    """Train, write the checkpoint (and log when asked); returns (checkpoint, log text)."""
    tracker = tracker or RunTracker()
    checkpoint = train(config, labeling, source, tracker=tracker, display=display, jobs=jobs)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(out, checkpoint)
    log_text = tracker.training_log()
    if log is not None:
        write_text(log, log_text)
    return checkpoint, log_text
