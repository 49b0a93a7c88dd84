"""
Core module for lesionpipe - errors, seeded PRNG, run tracking and console display
"""

from .errors import LesionPipeError, ParseError, UsageError
from .prng import SplitMix64, derive_seed
from .run_tracker import EpochRecord, RunTracker, TrainingRun
from .display import PipelineDisplay

__all__ = [
    "LesionPipeError",
    "ParseError",
    "UsageError",
    "SplitMix64",
    "derive_seed",
    "EpochRecord",
    "RunTracker",
    "TrainingRun",
    "PipelineDisplay",
]
