"""Look-at pinhole camera and a vectorized z-buffer triangle rasterizer.

Camera space is right-handed with the camera looking down ``-z``; pixel
``(row, col)`` has its centre at ``(col + 0.5, row + 0.5)`` in continuous
image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

NEAR = 1e-2
_PAIR_BUDGET = 1 << 22


@dataclass(frozen=True)
class CameraPose:
    """Camera on a sphere around the origin, looking at the origin.

    ``focal`` and ``principal`` are in units of image height/width, so the
    same pose renders consistently at any resolution.
    """

    azimuth: float
    elevation: float = 0.0
    radius: float = 4.0
    focal: float = 2.0
    principal: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValidationError(f"camera radius must be > 0, got {self.radius}")
        if not self.focal > 0:
            raise ValidationError(f"focal length must be > 0, got {self.focal}")
        if abs(self.elevation) >= 90:
            raise ValidationError("elevation must lie strictly inside (-90, 90)")
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)

    def position(self) -> np.ndarray:
        az, el = np.deg2rad(self.azimuth), np.deg2rad(self.elevation)
        return self.radius * np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])

    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the camera right, up and back axes."""
        az, el = np.deg2rad(self.azimuth), np.deg2rad(self.elevation)
        back = np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
        right = np.array([np.cos(az), 0.0, -np.sin(az)])
        up = np.cross(back, right)
        return np.stack([right, up, back])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position()) @ self.rotation().T

    def intrinsics(self, H: int, W: int) -> tuple[float, float, float]:
        return self.focal * H, self.principal[0] * W, self.principal[1] * H


@dataclass
class Fragments:
    """Per-pixel rasterization result.

    face_id is -1 for background; bary holds perspective-correct
    barycentric weights; depth is the distance along the view axis.
    """

    face_id: np.ndarray
    bary: np.ndarray
    depth: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.face_id >= 0


def face_normals(points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v0, v1, v2 = (points[faces[:, i]] for i in range(3))
    n = np.cross(v1 - v0, v2 - v0)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def rasterize(cam_points: np.ndarray, faces: np.ndarray, H: int, W: int, cam: CameraPose,
              cull_backfaces: bool = True) -> Fragments:
    """Z-buffered rasterization of camera-space triangles (CCW = outward)."""
    cam_points = np.asarray(cam_points, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    f, cx, cy = cam.intrinsics(H, W)
    depth_v = -cam_points[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = cx + f * cam_points[:, 0] / depth_v
        sy = cy - f * cam_points[:, 1] / depth_v

    keep = np.all(depth_v[faces] > NEAR, axis=1)
    if cull_backfaces and len(faces):
        n = face_normals(cam_points, faces)
        keep &= np.einsum("ij,ij->i", n, cam_points[faces[:, 0]]) < 0
    idx = np.nonzero(keep)[0]

    face_id = np.full((H, W), -1, dtype=np.int64)
    zbuf = np.full((H, W), np.inf)
    bary = np.zeros((H, W, 3))
    if idx.size == 0:
        return Fragments(face_id, bary, zbuf)

    px = (np.arange(W) + 0.5)[None, :].repeat(H, 0).ravel()
    py = (np.arange(H) + 0.5)[:, None].repeat(W, 1).ravel()
    flat_id = face_id.ravel()
    flat_z = zbuf.ravel()
    flat_b = bary.reshape(-1, 3)
    chunk = max(1, _PAIR_BUDGET // (H * W))
    for start in range(0, idx.size, chunk):
        fi = idx[start : start + chunk]
        tri = faces[fi]
        x0, x1, x2 = (sx[tri[:, i]][:, None] for i in range(3))
        y0, y1, y2 = (sy[tri[:, i]][:, None] for i in range(3))
        d0, d1, d2 = (depth_v[tri[:, i]][:, None] for i in range(3))
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        ok = np.abs(area) > 1e-12
        safe = np.where(ok, area, 1.0)
        l0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / safe
        l1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / safe
        l2 = 1.0 - l0 - l1
        inside = ok & (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        inv_d = l0 / d0 + l1 / d1 + l2 / d2
        with np.errstate(divide="ignore"):
            z = np.where(inside, 1.0 / inv_d, np.inf)
        best = np.argmin(z, axis=0)
        cols = np.arange(z.shape[1])
        zb = z[best, cols]
        win = zb < flat_z
        if not win.any():
            continue
        w = np.nonzero(win)[0]
        b = best[w]
        flat_z[w] = zb[w]
        flat_id[w] = fi[b]
        lb = np.stack([l0[b, w] / d0[b, 0], l1[b, w] / d1[b, 0], l2[b, w] / d2[b, 0]], axis=1)
        flat_b[w] = lb / lb.sum(axis=1, keepdims=True)
    return Fragments(face_id, bary, zbuf)
