"""Image-quality metrics: PSNR, SSIM and a pluggable feature-space perceptual distance.

Images are float arrays ``(H, W)`` or ``(H, W, C)`` in ``[0, 1]``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.signal import correlate2d

from .errors import ShapeError, ValidationError

PSNR_INF = math.inf
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` in dB; identical images give :data:`PSNR_INF` (``math.inf``)."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b, window: int = SSIM_WINDOW, c1: float = SSIM_C1, c2: float = SSIM_C2) -> float:
    """Mean SSIM over all ``window x window`` uniform windows (stride 1), averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    H, W = a.shape[:2]
    if H < window or W < window:
        raise ValidationError(f"image {H}x{W} smaller than the {window}x{window} SSIM window")
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mean = lambda z: _box_mean(z, window)
        mx, my = mean(x), mean(y)
        vx = mean(x * x) - mx * mx
        vy = mean(y * y) - my * my
        cxy = mean(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def _box_mean(z: np.ndarray, k: int) -> np.ndarray:
    """Means over every fully-contained ``k x k`` window, shape ``(H - k + 1, W - k + 1)``."""
    c = np.cumsum(np.cumsum(np.pad(z, ((1, 0), (1, 0))), axis=0), axis=1)
    return (c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]) / (k * k)


class RandomFeatureExtractor:
    """Fixed random conv features drawn from a seed: a stand-in for learned perceptual networks.

    Each layer is a 3x3 convolution followed by ReLU; layers after the first
    halve the resolution by 2x2 average pooling.
    """

    def __init__(self, seed: int = 0, channels: Sequence[int] = (8, 16), in_channels: int = 3):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.in_channels = in_channels
        self.kernels = []
        cin = in_channels
        for cout in channels:
            self.kernels.append(rng.standard_normal((cout, cin, 3, 3)) / math.sqrt(9 * cin))
            cin = cout

    def __call__(self, img: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(img, dtype=np.float64)
        if x.ndim == 2:
            x = x[..., None]
        if x.shape[2] != self.in_channels:
            raise ShapeError(f"extractor expects {self.in_channels} channels, got {x.shape[2]}")
        x = np.moveaxis(x * 2.0 - 1.0, -1, 0)
        feats = []
        for i, k in enumerate(self.kernels):
            if i:
                h, w = x.shape[1] // 2 * 2, x.shape[2] // 2 * 2
                if h == 0 or w == 0:
                    raise ShapeError("image too small for the extractor depth")
                x = x[:, :h, :w].reshape(x.shape[0], h // 2, 2, w // 2, 2).mean(axis=(2, 4))
            x = np.stack([sum(correlate2d(x[ci], k[co, ci], mode="same") for ci in range(k.shape[1]))
                          for co in range(k.shape[0])])
            x = np.maximum(x, 0.0)
            feats.append(x)
        return feats

    def describe(self) -> dict:
        return {"kind": "random-conv", "seed": self.seed, "channels": [k.shape[0] for k in self.kernels]}


def _unit_channels(f: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    """Normalize the channel vector at every spatial position to unit length."""
    return f / (np.sqrt(np.sum(f * f, axis=0, keepdims=True)) + eps)


def perceptual_distance(a, b, extractor: Callable | None = None) -> float:
    """Mean squared difference of channel-normalized features, averaged over layers."""
    a, b = _pair(a, b)
    extractor = extractor or RandomFeatureExtractor()
    fa, fb = extractor(a), extractor(b)
    if len(fa) != len(fb):
        raise ShapeError("extractor returned different layer counts")
    total = 0.0
    for x, y in zip(fa, fb):
        if x.shape != y.shape:
            raise ShapeError(f"feature shapes differ: {x.shape} vs {y.shape}")
        d = _unit_channels(x) - _unit_channels(y)
        total += float(np.mean(np.sum(d * d, axis=0)))
    return total / len(fa)


@dataclass
class MetricReport:
    psnr: list[float]
    ssim: list[float]
    perceptual: list[float]
    names: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.psnr)

    def means(self) -> dict:
        mean = lambda v: float(sum(v) / len(v)) if v else float("nan")
        return {"psnr": mean(self.psnr), "ssim": mean(self.ssim), "perceptual": mean(self.perceptual)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        views = [{"name": n, "psnr": _num(p), "ssim": s, "perceptual": d}
                 for n, p, s, d in zip(self.names or [str(i) for i in range(self.count)],
                                       self.psnr, self.ssim, self.perceptual)]
        m = self.means()
        summary = {"count": self.count, "psnr": _num(m["psnr"]), "ssim": m["ssim"],
                   "perceptual": m["perceptual"], "config_digest": self.digest()}
        return {"views": views, "summary": summary, "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _num(x: float):
    """JSON has no infinity; the PSNR sentinel is written as the string ``"inf"``."""
    return "inf" if math.isinf(x) else x


def evaluate_images(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], names: Sequence[str] | None = None,
                    extractor: RandomFeatureExtractor | None = None) -> MetricReport:
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground-truth images")
    if not preds:
        raise ValidationError("nothing to evaluate")
    extractor = extractor or RandomFeatureExtractor()
    report = MetricReport([], [], [], list(names or []),
                          {"ssim_window": SSIM_WINDOW, "ssim_c1": SSIM_C1, "ssim_c2": SSIM_C2,
                           "extractor": extractor.describe()})
    for p, g in zip(preds, gts):
        report.psnr.append(psnr(p, g))
        report.ssim.append(ssim(p, g))
        report.perceptual.append(perceptual_distance(p, g, extractor))
    return report
