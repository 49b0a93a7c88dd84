"""
Shared fixtures: synthetic lesion-like images and manifests on disk.

Class 0 images are dark disks and class 1 images are bright disks, both on a
grey background. Centers and radii wobble a little per image so no two images
are identical.
"""

import os
import sys
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from lesionpipe.data.raster import Image, ImageDirectory  # noqa: E402

BACKGROUND = 128
DARK = 30
BRIGHT = 225


def disk_image(width: int, height: int, value: int, index: int = 0) -> Image:
    """A filled disk of grey level ``value`` on the background."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    side = min(width, height)
    cx = (width - 1) / 2.0 + (index % 3) - 1
    cy = (height - 1) / 2.0 + ((index // 3) % 3) - 1
    radius = side * (0.25 + 0.02 * (index % 4))
    inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius * radius
    pixels = np.full((height, width, 3), BACKGROUND, dtype=np.uint8)
    pixels[inside] = (value, max(value - 10, 0), max(value - 20, 0))
    return Image.from_array(pixels)


def manifest_text(rows: Sequence[Tuple[str, int, int]]) -> str:
    lines = ["image_id,melanoma,seborrheic_keratosis"]
    lines.extend(f"{image_id},{m}.0,{k}.0" for image_id, m, k in rows)
    return "\n".join(lines) + "\n"


@pytest.fixture
def two_class_images(tmp_path) -> Tuple[ImageDirectory, List[Tuple[str, int, int]]]:
    """20 images at 32x32: 10 dark disks (label 0) then 10 bright disks (melanoma)."""
    directory = ImageDirectory(tmp_path / "images")
    rows = []
    for i in range(20):
        bright = i >= 10
        image_id = f"ISIC_{i:07d}"
        directory.write(image_id, disk_image(32, 32, BRIGHT if bright else DARK, i))
        rows.append((image_id, int(bright), 0))
    return directory, rows


@pytest.fixture
def toy_dataset(tmp_path) -> Dict[str, object]:
    """Eight raw 40x36 images with train/test manifests and a crop spec.

    Melanoma images are bright disks, keratosis images dark disks and nevi
    mid-grey disks. The same eight ids are used for training and testing.
    """
    raw = ImageDirectory(tmp_path / "raw")
    labels = [(1, 0), (0, 1), (0, 0), (1, 0), (0, 1), (0, 0), (1, 0), (0, 0)]
    rows = []
    for i, (m, k) in enumerate(labels):
        image_id = f"ISIC_{i:07d}"
        value = BRIGHT if m else DARK if k else 170
        raw.write(image_id, disk_image(40, 36, value, i))
        rows.append((image_id, m, k))
    train = tmp_path / "train.csv"
    train.write_text(manifest_text(rows), encoding="utf-8")
    test = tmp_path / "test.csv"
    test.write_text(manifest_text(rows), encoding="utf-8")
    crops = tmp_path / "crops.csv"
    crops.write_text("image_id,x,y,width,height\nISIC_0000000,2,2,32,32\n", encoding="utf-8")
    return {"root": tmp_path, "raw": raw, "rows": rows, "train": train, "test": test, "crops": crops}


@pytest.fixture
def tiny_config_text() -> str:
    """A fast config for end-to-end runs at S=16."""
    return (
        "# toy run\n"
        "input_size = 16\n"
        "architecture = conv:4,relu,maxpool,fc:1\n"
        "epochs = 2\n"
        "batch_size = 4\n"
        "lr = 0.01\n"
        "momentum = 0.9\n"
        "seed = 42\n"
        "presets = hflip\n"
    )
