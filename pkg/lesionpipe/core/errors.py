"""
Error types for lesionpipe.

Every failure raised by the pipeline is a ``LesionPipeError`` carrying a short
machine-readable ``code`` plus free-form ``details``. ``to_dict()`` renders the
same structured shape the CLI prints in verbose mode:

    {"status": "error", "error_code": ..., "message": ..., "details": {...}}
"""

from __future__ import annotations

from typing import Any, Dict, Optional


class LesionPipeError(Exception):
    """Base class for all pipeline errors."""

    code = "PIPELINE_ERROR"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "status": "error",
            "error_code": self.code,
            "message": self.message,
            "details": self.details,
        }


class ParseError(LesionPipeError):
    """A text input (CSV, config) was rejected at a specific line."""

    code = "PARSE_ERROR"

    def __init__(self, message: str, line: Optional[int] = None, details: Optional[Dict[str, Any]] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
            details = {**(details or {}), "line": line}
        super().__init__(message, details)


class DecodeError(LesionPipeError):
    code = "DECODE_ERROR"


class ManifestError(ParseError):
    code = "MANIFEST_ERROR"


class CropSpecError(ParseError):
    code = "CROP_SPEC_ERROR"


class ConfigError(ParseError):
    code = "CONFIG_ERROR"


class SubmissionError(ParseError):
    code = "SUBMISSION_ERROR"


class ImageNotFoundError(LesionPipeError):
    code = "UNRESOLVED_ID"


class BoundsError(LesionPipeError):
    code = "BOUNDS_ERROR"


class TransformError(LesionPipeError):
    code = "TRANSFORM_ERROR"


class ShapeError(LesionPipeError):
    code = "SHAPE_ERROR"


class NonFiniteError(LesionPipeError):
    code = "NON_FINITE"


class TrainingError(LesionPipeError):
    code = "TRAINING_ERROR"


class CheckpointError(LesionPipeError):
    code = "CHECKPOINT_ERROR"


class CalibrationError(LesionPipeError):
    code = "CALIBRATION_ERROR"


class UsageError(LesionPipeError):
    """Bad command line; the CLI exits with status 1 instead of 2."""

    code = "USAGE_ERROR"
