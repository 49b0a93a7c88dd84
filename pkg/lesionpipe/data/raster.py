"""
Raster I/O for the lesion pipeline.

Binary PPM (P6, maxval 255) is the only image container: decoding and encoding
are bit-exact inverses. The two CSV inputs are parsed here as well:

- the ground-truth manifest ``image_id,melanoma,seborrheic_keratosis`` (the
  ISIC-2017 shape: two one-hot columns, nevus implicit)
- the crop spec ``image_id,x,y,width,height`` recording the manual cropping
  decision for each image

All parse errors report the offending line number.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from lesionpipe.core.errors import (
    CropSpecError,
    DecodeError,
    ImageNotFoundError,
    ManifestError,
)

PPM_MAGIC = b"P6"
PPM_MAXVAL = 255
_PPM_WHITESPACE = b" \t\n\r\x0b\x0c"

MANIFEST_HEADER = ["image_id", "melanoma", "seborrheic_keratosis"]
CROP_SPEC_HEADER = ["image_id", "x", "y", "width", "height"]

_LABEL_CELLS = {"0": 0, "0.0": 0, "1": 1, "1.0": 1}

RGB = Tuple[int, int, int]


@dataclass(frozen=True, eq=False)
class Image:
    """8-bit RGB raster. ``pixels`` has shape (height, width, 3), row-major."""

    width: int
    height: int
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dimensions must be positive, got {self.width}x{self.height}")
        if self.pixels.dtype != np.uint8 or self.pixels.shape != (self.height, self.width, 3):
            raise ValueError(
                f"pixel array must be uint8 of shape ({self.height}, {self.width}, 3), "
                f"got {self.pixels.dtype} {self.pixels.shape}"
            )

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "Image":
        arr = np.ascontiguousarray(pixels, dtype=np.uint8)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected an (h, w, 3) array, got shape {arr.shape}")
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr)

    @classmethod
    def filled(cls, width: int, height: int, rgb: RGB) -> "Image":
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[...] = rgb
        return cls(width=width, height=height, pixels=arr)

    def pixel(self, x: int, y: int) -> RGB:
        r, g, b = self.pixels[y, x]
        return int(r), int(g), int(b)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.pixels, other.pixels)
        )

    __hash__ = None  # type: ignore[assignment]


# -----------------------------
# PPM codec
# -----------------------------
def _read_header_field(data: bytes, pos: int, name: str) -> Tuple[int, int]:
    """Read one whitespace-preceded decimal header field starting at ``pos``."""
    start = pos
    while pos < len(data) and data[pos] in _PPM_WHITESPACE:
        pos += 1
    if pos == start:
        raise DecodeError(f"malformed {name}: missing whitespace separator", {"field": name})
    if pos < len(data) and data[pos:pos + 1] == b"#":
        raise DecodeError(f"malformed {name}: header comments are not supported", {"field": name})
    digits_start = pos
    while pos < len(data) and data[pos:pos + 1].isdigit():
        pos += 1
    if pos == digits_start:
        raise DecodeError(f"malformed {name}", {"field": name})
    if pos >= len(data) or data[pos] not in _PPM_WHITESPACE:
        raise DecodeError(f"malformed {name}: expected whitespace after value", {"field": name})
    return int(data[digits_start:pos]), pos


def decode_ppm(data: bytes) -> Image:
    """Decode a binary (P6) PPM file into an Image."""
    if data[:2] != PPM_MAGIC:
        raise DecodeError("malformed magic: expected P6", {"field": "magic"})
    width, pos = _read_header_field(data, 2, "width")
    height, pos = _read_header_field(data, pos, "height")
    maxval, pos = _read_header_field(data, pos, "maxval")
    if width == 0:
        raise DecodeError("zero width", {"field": "width"})
    if height == 0:
        raise DecodeError("zero height", {"field": "height"})
    if maxval != PPM_MAXVAL:
        raise DecodeError(f"unsupported maxval {maxval}", {"field": "maxval"})

    # exactly one whitespace byte separates maxval from the payload
    pos += 1
    expected = width * height * 3
    payload = data[pos:]
    if len(payload) < expected:
        raise DecodeError(
            f"truncated payload: expected {expected} bytes, found {len(payload)}",
            {"field": "payload"},
        )
    if len(payload) > expected:
        raise DecodeError(
            f"trailing bytes after payload: {len(payload) - expected}",
            {"field": "payload"},
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()
    return Image(width=width, height=height, pixels=pixels)


def encode_ppm(img: Image) -> bytes:
    header = f"P6\n{img.width} {img.height}\n{PPM_MAXVAL}\n".encode("ascii")
    return header + np.ascontiguousarray(img.pixels).tobytes()


def read_ppm(path: Union[str, Path]) -> Image:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ImageNotFoundError(f"cannot read image {path}: {e.strerror}", {"path": str(path)}) from e
    try:
        return decode_ppm(data)
    except DecodeError as e:
        raise DecodeError(f"{path}: {e.message}", {**e.details, "path": str(path)}) from e


def write_ppm(path: Union[str, Path], img: Image) -> None:
    Path(path).write_bytes(encode_ppm(img))


class ImageDirectory:
    """Resolves image ids to ``<root>/<image_id>.ppm``."""

    suffix = ".ppm"

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def path(self, image_id: str) -> Path:
        return self.root / f"{image_id}{self.suffix}"

    def __call__(self, image_id: str) -> Image:
        path = self.path(image_id)
        if not path.is_file():
            raise ImageNotFoundError(f"unresolvable image id {image_id!r}", {"path": str(path)})
        return read_ppm(path)

    def ids(self) -> List[str]:
        return sorted(p.stem for p in self.root.glob(f"*{self.suffix}") if p.is_file())

    def write(self, image_id: str, img: Image) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.path(image_id)
        write_ppm(path, img)
        return path


# -----------------------------
# Manifest
# -----------------------------
@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    melanoma: int
    seborrheic_keratosis: int

    @property
    def is_nevus(self) -> bool:
        return not (self.melanoma or self.seborrheic_keratosis)


@dataclass(frozen=True)
class DatasetManifest:
    entries: Tuple[ManifestEntry, ...] = ()

    def __post_init__(self):
        seen = set()
        for entry in self.entries:
            if entry.image_id in seen:
                raise ManifestError(f"duplicate image_id {entry.image_id!r}")
            seen.add(entry.image_id)
            if entry.melanoma not in (0, 1) or entry.seborrheic_keratosis not in (0, 1):
                raise ManifestError(f"non-binary label for {entry.image_id!r}")
            if entry.melanoma and entry.seborrheic_keratosis:
                raise ManifestError(f"labels not mutually exclusive for {entry.image_id!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def ids(self) -> List[str]:
        return [e.image_id for e in self.entries]

    def get(self, image_id: str) -> Optional[ManifestEntry]:
        for entry in self.entries:
            if entry.image_id == image_id:
                return entry
        return None


def _csv_rows(text: str) -> Iterator[Tuple[int, List[str]]]:
    """Yield (line_number, cells) for every non-blank CSV record."""
    reader = csv.reader(io.StringIO(text, newline=""))
    for row in reader:
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        yield reader.line_num, row


def _check_header(rows: Iterator[Tuple[int, List[str]]], expected: Sequence[str], error_cls) -> None:
    first = next(rows, None)
    if first is None:
        raise error_cls(f"missing header, expected {','.join(expected)}", line=1)
    line, cells = first
    if [c.strip() for c in cells] != list(expected):
        raise error_cls(
            f"missing or misordered header, expected {','.join(expected)}, got {','.join(cells)}",
            line=line,
        )


def _parse_label(cell: str, column: str, line: int) -> int:
    value = _LABEL_CELLS.get(cell.strip())
    if value is None:
        raise ManifestError(f"non-binary {column} label {cell!r}", line=line)
    return value


def load_manifest(text: str) -> DatasetManifest:
    rows = _csv_rows(text)
    _check_header(rows, MANIFEST_HEADER, ManifestError)

    entries: List[ManifestEntry] = []
    seen = set()
    for line, cells in rows:
        if len(cells) != len(MANIFEST_HEADER):
            raise ManifestError(f"expected {len(MANIFEST_HEADER)} cells, got {len(cells)}", line=line)
        image_id = cells[0].strip()
        if not image_id:
            raise ManifestError("empty image_id", line=line)
        if image_id in seen:
            raise ManifestError(f"duplicate image_id {image_id!r}", line=line)
        melanoma = _parse_label(cells[1], "melanoma", line)
        keratosis = _parse_label(cells[2], "seborrheic_keratosis", line)
        if melanoma and keratosis:
            raise ManifestError("labels not mutually exclusive", line=line)
        seen.add(image_id)
        entries.append(ManifestEntry(image_id, melanoma, keratosis))
    return DatasetManifest(tuple(entries))


def dump_manifest(manifest: DatasetManifest) -> str:
    lines = [",".join(MANIFEST_HEADER)]
    for e in manifest:
        lines.append(f"{e.image_id},{float(e.melanoma):.1f},{float(e.seborrheic_keratosis):.1f}")
    return "\n".join(lines) + "\n"


# -----------------------------
# Crop spec
# -----------------------------
class Rect(NamedTuple):
    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class CropSpec:
    entries: Dict[str, Rect] = field(default_factory=dict)

    def get(self, image_id: str) -> Optional[Rect]:
        return self.entries.get(image_id)

    def __len__(self) -> int:
        return len(self.entries)


def _parse_int(cell: str, column: str, line: int) -> int:
    cell = cell.strip()
    try:
        value = int(cell)
    except ValueError:
        raise CropSpecError(f"non-integer crop {column} {cell!r}", line=line) from None
    if value < 0:
        raise CropSpecError(f"negative crop {column}", line=line)
    return value


def load_crop_spec(text: str) -> CropSpec:
    rows = _csv_rows(text)
    _check_header(rows, CROP_SPEC_HEADER, CropSpecError)

    entries: Dict[str, Rect] = {}
    for line, cells in rows:
        if len(cells) != len(CROP_SPEC_HEADER):
            raise CropSpecError(f"expected {len(CROP_SPEC_HEADER)} cells, got {len(cells)}", line=line)
        image_id = cells[0].strip()
        if not image_id:
            raise CropSpecError("empty image_id", line=line)
        if image_id in entries:
            raise CropSpecError(f"duplicate image_id {image_id!r}", line=line)
        x, y, w, h = (_parse_int(c, col, line) for c, col in zip(cells[1:], CROP_SPEC_HEADER[1:]))
        if w == 0:
            raise CropSpecError("zero crop width", line=line)
        if h == 0:
            raise CropSpecError("zero crop height", line=line)
        entries[image_id] = Rect(x, y, w, h)
    return CropSpec(entries)
