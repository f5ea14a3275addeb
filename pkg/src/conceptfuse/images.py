"""Binary PPM (P6) image files."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(Path(path), format="PPM")


def read_ppm(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        if im.format != "PPM":
            raise ValueError(f"{path} is not a PPM file")
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
