"""
Image preprocessing: cropping, size normalization, affine augmentation and
conversion to network input tensors.

Conventions (fixed so results are bit-exact):

- Resampling is bilinear with half-pixel centers,
  ``src = (dst + 0.5) * (in / out) - 0.5``, clamped to the valid range.
- Affine transforms map OUTPUT coordinates to SOURCE coordinates (inverse
  mapping, no holes). Source points outside the image read the fill color.
- Interpolated channel values are rounded half-up to 8 bits.
"""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from lesionpipe.core.errors import BoundsError, ManifestError, ShapeError, TransformError
from lesionpipe.core.prng import SplitMix64, derive_seed
from lesionpipe.data.raster import (
    RGB,
    DatasetManifest,
    Image,
    ManifestEntry,
    Rect,
)

DEFAULT_INPUT_SIZE = 256
AUG_SUFFIX = "__aug"

# source coordinates this close to a grid point are snapped onto it
_GRID_SNAP = 1e-9

ImageSource = Callable[[str], Image]


# -----------------------------
# Cropping and resizing
# -----------------------------
def crop(img: Image, rect: Sequence[int], image_id: str = "<image>") -> Image:
    x, y, w, h = (int(v) for v in rect)
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > img.width or y + h > img.height:
        raise BoundsError(
            f"crop rectangle {(x, y, w, h)} outside {image_id} ({img.width}x{img.height})",
            {"image_id": image_id, "rect": [x, y, w, h], "size": [img.width, img.height]},
        )
    return Image.from_array(img.pixels[y:y + h, x:x + w])


def center_square_crop(img: Image) -> Image:
    side = min(img.width, img.height)
    x = (img.width - side) // 2
    y = (img.height - side) // 2
    return crop(img, Rect(x, y, side, side))


def _bilinear_axis(n_in: int, n_out: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower index, upper index and weight of the upper sample for each output position."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def resize_bilinear(img: Image, out_w: int, out_h: int) -> Image:
    if out_w < 1 or out_h < 1:
        raise ShapeError(f"output size must be positive, got {out_w}x{out_h}")
    x0, x1, fx = _bilinear_axis(img.width, out_w)
    y0, y1, fy = _bilinear_axis(img.height, out_h)

    src = img.pixels.astype(np.float64)
    fx = fx[None, :, None]
    fy = fy[:, None, None]
    top = src[y0][:, x0] * (1.0 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1.0 - fx) + src[y1][:, x1] * fx
    return Image.from_array(_round_half_up(top * (1.0 - fy) + bottom * fy))


def normalize_size(img: Image, size: int, rect: Optional[Sequence[int]] = None, image_id: str = "<image>") -> Image:
    """Crop (explicit rect, else centered square) then resize to ``size`` x ``size``."""
    cropped = crop(img, rect, image_id) if rect is not None else center_square_crop(img)
    if cropped.width == size and cropped.height == size:
        return cropped
    return resize_bilinear(cropped, size, size)


# -----------------------------
# Affine transforms
# -----------------------------
@dataclass(frozen=True, eq=False)
class AffineTransform:
    """2x3 matrix taking (x_out, y_out, 1) to (x_src, y_src)."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (2, 3):
            raise TransformError(f"affine matrix must be 2x3, got {m.shape}")
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.m, [0.0, 0.0, 1.0]])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.m)))

    def map(self, x, y):
        m = self.m
        return m[0, 0] * x + m[0, 1] * y + m[0, 2], m[1, 0] * x + m[1, 1] * y + m[1, 2]


@dataclass(frozen=True)
class Preset:
    """A named augmentation; ranged presets draw their parameter per image."""

    kind: str
    low: float = 0.0
    high: float = 0.0

    @property
    def is_ranged(self) -> bool:
        return self.low != self.high

    def descriptor(self) -> str:
        if self.kind in ("hflip", "vflip"):
            return self.kind
        value = f"{self.low!r}~{self.high!r}" if self.is_ranged else repr(self.low)
        return f"{self.kind}:{value}"


_PRESET_RE = re.compile(r"^(hflip|vflip|scale|rotate)(?::([^~]+)(?:~(.+))?)?$")


def parse_preset(text: str) -> Preset:
    match = _PRESET_RE.match(text.strip())
    if not match:
        raise TransformError(f"unknown preset {text!r}", {"preset": text})
    kind, low_s, high_s = match.groups()
    if kind in ("hflip", "vflip"):
        if low_s is not None:
            raise TransformError(f"preset {kind} takes no parameter", {"preset": text})
        return Preset(kind)
    if low_s is None:
        raise TransformError(f"preset {kind} needs a parameter, e.g. {kind}:1.2", {"preset": text})
    try:
        low = float(low_s)
        high = float(high_s) if high_s is not None else low
    except ValueError:
        raise TransformError(f"bad parameter in preset {text!r}", {"preset": text}) from None
    if not (math.isfinite(low) and math.isfinite(high)) or high < low:
        raise TransformError(f"bad parameter range in preset {text!r}", {"preset": text})
    if kind == "scale" and low <= 0:
        raise TransformError(f"scale factor must be positive in preset {text!r}", {"preset": text})
    return Preset(kind, low, high)


def parse_presets(text: str) -> List[Preset]:
    return [parse_preset(p) for p in text.split(",") if p.strip()]


def _exact_cos_sin(degrees: float) -> Tuple[float, float]:
    if float(degrees).is_integer() and int(degrees) % 90 == 0:
        return {0: (1.0, 0.0), 90: (0.0, 1.0), 180: (-1.0, 0.0), 270: (0.0, -1.0)}[int(degrees) % 360]
    rad = math.radians(degrees)
    return math.cos(rad), math.sin(rad)


def make_preset(name, img_w: int, img_h: int, value: Optional[float] = None) -> AffineTransform:
    """Transform for a preset about the image center.

    ``name`` is a Preset or a descriptor such as ``"hflip"`` or ``"rotate:15"``;
    ``value`` overrides the parameter (used for drawn values of ranged presets).
    """
    preset = parse_preset(name) if isinstance(name, str) else name
    param = preset.low if value is None else value
    cx = (img_w - 1) / 2.0
    cy = (img_h - 1) / 2.0

    if preset.kind == "hflip":
        m = [[-1.0, 0.0, img_w - 1.0], [0.0, 1.0, 0.0]]
    elif preset.kind == "vflip":
        m = [[1.0, 0.0, 0.0], [0.0, -1.0, img_h - 1.0]]
    elif preset.kind == "scale":
        if not param > 0:
            raise TransformError(f"scale factor must be positive, got {param}")
        inv = 1.0 / param
        m = [[inv, 0.0, cx - cx * inv], [0.0, inv, cy - cy * inv]]
    elif preset.kind == "rotate":
        # rotating the picture by +theta samples the source at -theta
        c, s = _exact_cos_sin(param)
        m = [[c, s, cx - (c * cx + s * cy)], [-s, c, cy - (-s * cx + c * cy)]]
    else:
        raise TransformError(f"unknown preset {preset.kind!r}")
    return AffineTransform(np.array(m, dtype=np.float64))


def compose(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    """Lookup through ``b`` first, then through ``a``."""
    return AffineTransform((a.homogeneous() @ b.homogeneous())[:2])


def _snap(coords: np.ndarray) -> np.ndarray:
    nearest = np.round(coords)
    return np.where(np.abs(coords - nearest) < _GRID_SNAP, nearest, coords)


def apply_affine(img: Image, t: AffineTransform, fill: RGB = (0, 0, 0)) -> Image:
    if not t.is_finite():
        raise TransformError("affine matrix has non-finite entries", {"matrix": t.m.tolist()})
    h, w = img.height, img.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx, sy = t.map(xs, ys)
    sx = _snap(sx)
    sy = _snap(sy)

    # pad by one fill pixel so neighbours straddling the border blend with fill
    padded = np.empty((h + 2, w + 2, 3), dtype=np.float64)
    padded[...] = np.asarray(fill, dtype=np.float64)
    padded[1:-1, 1:-1] = img.pixels
    px = sx + 1.0
    py = sy + 1.0
    inside = (px >= 0.0) & (px <= w + 1.0) & (py >= 0.0) & (py <= h + 1.0)
    px = np.where(inside, px, 0.0)
    py = np.where(inside, py, 0.0)

    x0 = np.minimum(np.floor(px).astype(np.intp), w)
    y0 = np.minimum(np.floor(py).astype(np.intp), h)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    top = padded[y0, x0] * (1.0 - fx) + padded[y0, x0 + 1] * fx
    bottom = padded[y0 + 1, x0] * (1.0 - fx) + padded[y0 + 1, x0 + 1] * fx
    out = top * (1.0 - fy) + bottom * fy
    out[~inside] = np.asarray(fill, dtype=np.float64)
    return Image.from_array(_round_half_up(out))


# -----------------------------
# Dataset augmentation
# -----------------------------
@dataclass(frozen=True)
class AugmentPolicy:
    presets: Tuple[Preset, ...] = ()
    seed: int = 0

    @classmethod
    def from_descriptors(cls, descriptors: Iterable[str], seed: int = 0) -> "AugmentPolicy":
        return cls(tuple(parse_preset(d) for d in descriptors), seed)

    def transform_for(self, preset_index: int, image_index: int, img_w: int, img_h: int) -> AffineTransform:
        preset = self.presets[preset_index]
        value = None
        if preset.is_ranged:
            rng = SplitMix64(derive_seed(self.seed, image_index, preset_index))
            value = rng.uniform(preset.low, preset.high)
        return make_preset(preset, img_w, img_h, value)


def augmented_id(image_id: str, k: int) -> str:
    return f"{image_id}{AUG_SUFFIX}{k}"


def augment_dataset(
    manifest: DatasetManifest,
    policy: AugmentPolicy,
    image_source: ImageSource,
    fill: RGB = (0, 0, 0),
    jobs: int = 1,
) -> Tuple[DatasetManifest, Dict[str, Image]]:
    """Expand ``manifest`` with one copy per preset per image.

    Each original entry is followed by its copies ``<id>__aug0`` ... in preset
    order; copies inherit the source labels. Returns the expanded manifest and
    the generated images keyed by their new ids.
    """
    if not policy.presets:
        return manifest, {}

    def _augment_one(args: Tuple[int, ManifestEntry]) -> List[Tuple[str, Image]]:
        index, entry = args
        img = image_source(entry.image_id)
        return [
            (augmented_id(entry.image_id, k), apply_affine(img, policy.transform_for(k, index, img.width, img.height), fill))
            for k in range(len(policy.presets))
        ]

    work = list(enumerate(manifest.entries))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_augment_one, work))
    else:
        results = [_augment_one(item) for item in work]

    entries: List[ManifestEntry] = []
    generated: Dict[str, Image] = {}
    for entry, copies in zip(manifest.entries, results):
        entries.append(entry)
        for new_id, img in copies:
            entries.append(ManifestEntry(new_id, entry.melanoma, entry.seborrheic_keratosis))
            generated[new_id] = img
    try:
        expanded = DatasetManifest(tuple(entries))
    except ManifestError as e:
        raise ManifestError(f"augmented ids collide with existing ids: {e.message}") from e
    return expanded, generated


# -----------------------------
# Network input
# -----------------------------
@dataclass(frozen=True, eq=False)
class InputTensor:
    data: np.ndarray = field(repr=False)
    channel_means: Tuple[float, float, float] = (0.0, 0.0, 0.0)


def to_tensor(img: Image, channel_means: Sequence[float], size: Optional[int] = None) -> InputTensor:
    """[3, S, S] float32 tensor of ``pixel / 255 - mean``."""
    expected = size if size is not None else img.width
    if img.width != expected or img.height != expected:
        raise ShapeError(
            f"input image is {img.width}x{img.height}, expected {expected}x{expected}",
            {"expected": expected, "got": [img.width, img.height]},
        )
    data = pixels_to_batch(img.pixels[None], channel_means)[0]
    return InputTensor(data, tuple(float(m) for m in np.asarray(channel_means, dtype=np.float32)))


def pixels_to_batch(pixels: np.ndarray, channel_means: Sequence[float]) -> np.ndarray:
    """[N, H, W, 3] uint8 pixels to an [N, 3, H, W] float32 batch of ``pixel / 255 - mean``."""
    means = np.asarray(channel_means, dtype=np.float32)
    if means.shape != (3,):
        raise ShapeError(f"need 3 channel means, got {len(channel_means)}")
    data = pixels.astype(np.float32) / np.float32(255.0) - means
    return np.ascontiguousarray(data.transpose(0, 3, 1, 2))


def compute_channel_means(images: Iterable[Image]) -> Tuple[float, float, float]:
    totals = np.zeros(3, dtype=np.float64)
    count = 0
    for img in images:
        totals += img.pixels.reshape(-1, 3).sum(axis=0, dtype=np.float64)
        count += img.width * img.height
    if count == 0:
        raise ShapeError("cannot compute channel means of an empty training set")
    means = totals / (count * 255.0)
    return float(means[0]), float(means[1]), float(means[2])
