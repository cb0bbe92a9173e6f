"""8-bit PNG helpers for float images in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    return to_uint8(img).astype(np.float64) / 255.0


def write_png(path: str | Path, img: np.ndarray) -> None:
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    mode = {3: "RGB", 4: "RGBA"}[arr.shape[2]] if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode=mode).save(path, format="PNG", optimize=False, compress_level=6)


def read_png(path: str | Path, mode: str = "RGB") -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert(mode), dtype=np.float64) / 255.0


def read_png_uint8(path: str | Path, mode: str = "RGBA") -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert(mode))
