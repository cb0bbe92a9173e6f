"""Face detection interface, crop + upscale, feathered paste-back and face-view selection.

Images are float arrays ``(H, W, C)`` in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .body import DEFAULT_LAYOUT, ViewLayout
from .errors import DetectionError, ShapeError, ValidationError

CROP_MARGIN = 0.25
FEATHER = 4


@dataclass(frozen=True)
class FaceBox:
    x: int
    y: int
    w: int
    h: int
    confidence: float = 1.0
    source: str = "ground-truth"

    @property
    def area(self) -> int:
        return self.w * self.h

    def validate(self, height: int, width: int) -> None:
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box has non-positive size: {self}")
        if self.x < 0 or self.y < 0 or self.x + self.w > width or self.y + self.h > height:
            raise ValidationError(f"box {self} outside a {height}x{width} image")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h,
                "confidence": self.confidence, "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> "FaceBox":
        return cls(int(d["x"]), int(d["y"]), int(d["w"]), int(d["h"]),
                   float(d.get("confidence", 1.0)), d.get("source", "ground-truth"))


Provider = Callable[[np.ndarray], Sequence[FaceBox]]


class GroundTruthProvider:
    """Returns stored boxes regardless of image content."""

    def __init__(self, boxes: Sequence[FaceBox] = ()):
        self.boxes = list(boxes)

    def __call__(self, image: np.ndarray) -> list[FaceBox]:
        return list(self.boxes)


def detect_face(image: np.ndarray, provider: Provider) -> FaceBox | None:
    """Best candidate by confidence, then area, then smallest x; ``None`` if there is no face."""
    try:
        candidates = list(provider(image))
    except Exception as exc:
        raise DetectionError(f"face provider failed: {exc}") from exc
    if not candidates:
        return None
    return max(candidates, key=lambda b: (b.confidence, b.area, -b.x))


def _keys(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    out[near] = ((a + 2) * x[near] - (a + 3)) * x[near] ** 2 + 1
    out[far] = a * (((x[far] - 5) * x[far] + 8) * x[far] - 4)
    return out


def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` half-pixel bicubic resampling weights with edge replication.

    Downscaling widens the kernel by the scale factor (antialiasing).
    """
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    support = 2.0 * stretch
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        lo, hi = math.floor(src - support) + 1, math.floor(src + support)
        taps = np.arange(lo, hi + 1)
        w = _keys((src - taps) / stretch)
        w /= w.sum()
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), w)
    return mat


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[:2]
    if (H, W) == (out_h, out_w):
        return img.copy()
    return np.einsum("ih,hwc,jw->ijc", bicubic_matrix(H, out_h), img.reshape(H, W, -1),
                     bicubic_matrix(W, out_w)).reshape(out_h, out_w, *img.shape[2:])


def _inverse_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample a crop-resolution image back to region size.

    When the crop was an upscale, the least-squares inverse of that upscale is
    used, so an untouched crop maps back onto the original pixels.
    """
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    if h < out_h or w < out_w:
        return resize(img, out_h, out_w)
    ry = np.linalg.pinv(bicubic_matrix(out_h, h))
    rx = np.linalg.pinv(bicubic_matrix(out_w, w))
    return np.einsum("ih,hwc,jw->ijc", ry, img.reshape(h, w, -1), rx).reshape(out_h, out_w, *img.shape[2:])


@dataclass
class FaceCrop:
    """``image`` is the resampled square crop; ``region`` is ``(x0, y0, side)`` in the source image;
    ``mask`` is the ``side x side`` feathered matte used for compositing."""

    image: np.ndarray
    box: FaceBox
    mask: np.ndarray
    region: tuple[int, int, int]


def crop_region(box: FaceBox, height: int, width: int, margin: float = CROP_MARGIN) -> tuple[int, int, int]:
    side = int(round(max(box.w, box.h) * (1.0 + margin)))
    side = max(1, min(side, height, width))
    cx, cy = box.x + box.w / 2.0, box.y + box.h / 2.0
    x0 = int(np.clip(int(round(cx - side / 2.0)), 0, width - side))
    y0 = int(np.clip(int(round(cy - side / 2.0)), 0, height - side))
    return x0, y0, side


def feather_mask(box: FaceBox, region: tuple[int, int, int], ramp: int = FEATHER) -> np.ndarray:
    """1 deep inside the box, 0 outside, linear ramp over ``ramp`` pixels inside the edge.

    A pixel at distance ``d`` (in pixels) from the nearest box edge gets
    ``min(1, (d + 1) / (ramp + 1))``.
    """
    x0, y0, side = region
    ys, xs = np.mgrid[y0 : y0 + side, x0 : x0 + side]
    inside = (xs >= box.x) & (xs < box.x + box.w) & (ys >= box.y) & (ys < box.y + box.h)
    d = np.minimum.reduce([xs - box.x, box.x + box.w - 1 - xs, ys - box.y, box.y + box.h - 1 - ys])
    m = np.minimum(1.0, (d + 1.0) / (ramp + 1.0)) if ramp > 0 else np.ones(d.shape)
    return np.where(inside, m, 0.0)


def crop_and_upscale(image: np.ndarray, box: FaceBox, target: int, margin: float = CROP_MARGIN,
                     ramp: int = FEATHER, upscaler: Callable | None = None) -> FaceCrop:
    """Square crop around the box (margin added, clamped into the image) resampled to ``target``."""
    H, W = image.shape[:2]
    box.validate(H, W)
    x0, y0, side = crop_region(box, H, W, margin)
    if side <= 0:
        raise ValidationError("crop region is empty after clamping")
    patch = np.asarray(image, dtype=np.float64)[y0 : y0 + side, x0 : x0 + side]
    up = (upscaler or resize)(patch, target, target)
    return FaceCrop(up, box, feather_mask(box, (x0, y0, side), ramp), (x0, y0, side))


def paste_back(original: np.ndarray, refined: np.ndarray, crop: FaceCrop) -> np.ndarray:
    """Composite ``mask * refined + (1 - mask) * original`` inside the crop region only."""
    if refined.shape != crop.image.shape:
        raise ShapeError(f"refined face {refined.shape} does not match crop {crop.image.shape}")
    x0, y0, side = crop.region
    back = _inverse_resize(np.asarray(refined, dtype=np.float64), side, side)
    out = np.array(original, dtype=np.float64, copy=True)
    region = out[y0 : y0 + side, x0 : x0 + side]
    m = crop.mask.reshape(side, side, *([1] * (region.ndim - 2)))
    out[y0 : y0 + side, x0 : x0 + side] = m * back + (1.0 - m) * region
    return out


FRONT, FRONT_LEFT, FRONT_RIGHT = 0.0, 315.0, 45.0


def select_face_views(layout: ViewLayout = DEFAULT_LAYOUT) -> tuple[int, int, int]:
    """View ids of the front, front-left and front-right cameras, in that order."""
    az = [a % 360.0 for a in layout.azimuths]
    try:
        return tuple(az.index(a) for a in (FRONT, FRONT_LEFT, FRONT_RIGHT))
    except ValueError as exc:
        raise ValidationError(f"layout {layout.azimuths} lacks a front / front-left / front-right view") from exc
