"""Toy parametric humanoid, the fixed six-view camera layout and normal-map rendering.

The body is a stand-in for a SMPL mesh: capsules for torso and limbs and a
sphere for the head, each a separate closed part. It faces ``+z`` with ``y``
up, so its left side is ``+x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LookupFailure, ValidationError
from .raster import CameraPose, face_normals, rasterize

SHAPE_NAMES = ("height", "girth", "head_size", "limb_length")
POSE_NAMES = ("torso_yaw", "left_arm", "right_arm", "left_leg", "right_leg", "head_yaw")
SHAPE_BOUNDS = (0.5, 2.0)
POSE_BOUNDS = {
    "torso_yaw": (-np.pi, np.pi),
    "left_arm": (-0.8, 0.8),
    "right_arm": (-0.8, 0.8),
    "left_leg": (-0.5, 0.5),
    "right_leg": (-0.5, 0.5),
    "head_yaw": (-0.6, 0.6),
}

# rest-pose angles (radians) added to the pose vector, so zero pose is an A-pose
_ARM_REST = 0.25
_LEG_REST = 0.06


@dataclass(frozen=True)
class BodyParams:
    """Shape scale factors (unitless, default 1) and pose angles (radians, default 0)."""

    shape: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    pose: tuple[float, ...] = (0.0,) * 6

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(float(v) for v in self.shape))
        object.__setattr__(self, "pose", tuple(float(v) for v in self.pose))

    def validate(self) -> None:
        if len(self.shape) != len(SHAPE_NAMES) or len(self.pose) != len(POSE_NAMES):
            raise ValidationError(f"need {len(SHAPE_NAMES)} shape and {len(POSE_NAMES)} pose values")
        lo, hi = SHAPE_BOUNDS
        for name, v in zip(SHAPE_NAMES, self.shape):
            if not lo <= v <= hi:
                raise ValidationError(f"shape {name}={v} outside [{lo}, {hi}]")
        for name, v in zip(POSE_NAMES, self.pose):
            lo, hi = POSE_BOUNDS[name]
            if not lo <= v <= hi:
                raise ValidationError(f"pose {name}={v} outside [{lo:.3f}, {hi:.3f}]")

    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "pose": list(self.pose)}

    @classmethod
    def from_dict(cls, d: dict) -> "BodyParams":
        return cls(shape=tuple(d["shape"]), pose=tuple(d["pose"]))


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None
    part_of_face: np.ndarray | None = None
    part_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)

    def validate(self) -> None:
        n = len(self.vertices)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValidationError("vertices must be N x 3")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValidationError("face index out of range")
        v0, v1, v2 = (self.vertices[self.faces[:, i]] for i in range(3))
        area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
        if np.any(area <= 1e-12):
            raise ValidationError(f"{int(np.sum(area <= 1e-12))} degenerate faces")

    @staticmethod
    def concat(meshes: list["TriangleMesh"], names: list[str] | None = None) -> "TriangleMesh":
        verts, faces, colors, parts = [], [], [], []
        offset = 0
        has_colors = all(m.colors is not None for m in meshes)
        for i, m in enumerate(meshes):
            verts.append(m.vertices)
            faces.append(m.faces + offset)
            parts.append(np.full(len(m.faces), i))
            if has_colors:
                colors.append(m.colors)
            offset += len(m.vertices)
        return TriangleMesh(
            np.concatenate(verts), np.concatenate(faces),
            np.concatenate(colors) if has_colors else None,
            np.concatenate(parts), tuple(names or ()),
        )


def capsule(length: float, radius: float, n_around: int = 12, n_cap: int = 4) -> TriangleMesh:
    """Capsule along ``+y`` from ``y=0`` to ``y=length`` (a sphere when length is 0)."""
    phis = 2 * np.pi * np.arange(n_around) / n_around
    rings = []
    for k in range(1, n_cap + 1):  # bottom hemisphere, from pole upward
        th = -np.pi / 2 + np.pi / 2 * k / n_cap
        rings.append((radius * np.sin(th), radius * np.cos(th)))
    bottom = [(y, r) for (y, r) in rings]
    top = [(length - y, r) for (y, r) in reversed(rings)]
    if length == 0:
        top = top[1:]
    profile = bottom + top
    verts = [(0.0, -radius, 0.0)]
    for y, r in profile:
        for p in phis:
            verts.append((r * np.cos(p), y, r * np.sin(p)))
    verts.append((0.0, length + radius, 0.0))
    verts = np.array(verts)
    faces = []
    n = n_around
    for j in range(n):  # bottom fan, outward normal points -y
        faces.append((0, 1 + j, 1 + (j + 1) % n))
    for ring in range(len(profile) - 1):
        a = 1 + ring * n
        b = a + n
        for j in range(n):
            j2 = (j + 1) % n
            faces.append((a + j, b + j, b + j2))
            faces.append((a + j, b + j2, a + j2))
    last = 1 + (len(profile) - 1) * n
    top_pole = len(verts) - 1
    for j in range(n):
        faces.append((top_pole, last + (j + 1) % n, last + j))
    return TriangleMesh(verts, np.array(faces))


def _rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _hanging_limb(anchor, length, radius, angle, side: int) -> TriangleMesh:
    """Limb hanging from ``anchor`` on the ``+x`` side, swung outward by ``angle``; mirrored for side -1."""
    m = capsule(length, radius)
    v = m.vertices.copy()
    v[:, 1] = -v[:, 1]  # hang downward
    v = v @ _rot_z(angle).T + np.asarray(anchor)
    faces = m.faces[:, ::-1].copy()  # the y flip reversed orientation
    if side < 0:
        v[:, 0] = -v[:, 0]
        faces = faces[:, ::-1].copy()
    return TriangleMesh(v, faces)


def head_center(params: BodyParams) -> tuple[np.ndarray, float]:
    """World-space head centre and radius (before the global torso yaw)."""
    _, girth, head_size, _ = params.shape
    r = 0.16 * head_size
    return np.array([0.0, 0.47 + 0.15 * girth + 0.03 + r, 0.0]), r


def build_body(params: BodyParams) -> TriangleMesh:
    params.validate()
    height, girth, head_size, limb = params.shape
    yaw, l_arm, r_arm, l_leg, r_leg, head_yaw = params.pose

    torso_r = 0.15 * girth
    torso = capsule(0.42, torso_r)
    torso.vertices[:, 1] += 0.05
    hc, hr = head_center(params)
    head = capsule(0.0, hr)
    head.vertices = head.vertices @ _rot_y(head_yaw).T + hc
    shoulder_y = 0.05 + 0.42
    arm_len, arm_r = 0.62 * limb, 0.048
    leg_len, leg_r = 0.82 * limb, 0.065
    shoulder_x = torso_r + arm_r + 0.01
    hip_x = 0.55 * torso_r
    parts = [
        torso,
        head,
        _hanging_limb((shoulder_x, shoulder_y, 0.0), arm_len, arm_r, _ARM_REST + l_arm, +1),
        _hanging_limb((shoulder_x, shoulder_y, 0.0), arm_len, arm_r, _ARM_REST + r_arm, -1),
        _hanging_limb((hip_x, 0.0, 0.0), leg_len, leg_r, _LEG_REST + l_leg, +1),
        _hanging_limb((hip_x, 0.0, 0.0), leg_len, leg_r, _LEG_REST + r_leg, -1),
    ]
    mesh = TriangleMesh.concat(parts, ["torso", "head", "left_arm", "right_arm", "left_leg", "right_leg"])
    mesh.vertices = mesh.vertices @ _rot_y(yaw).T
    mesh.vertices[:, 1] *= height
    return mesh


@dataclass(frozen=True)
class ViewLayout:
    azimuths: tuple[float, ...] = (0.0, 45.0, 90.0, 180.0, 270.0, 315.0)
    elevation: float = 0.0
    radius: float = 4.0
    focal: float = 1.7


DEFAULT_LAYOUT = ViewLayout()


def camera_for_view(view_id: int, layout: ViewLayout = DEFAULT_LAYOUT) -> CameraPose:
    if not 0 <= view_id < len(layout.azimuths):
        raise LookupFailure(f"view id {view_id} not in layout of {len(layout.azimuths)} views")
    return CameraPose(layout.azimuths[view_id], layout.elevation, layout.radius, layout.focal)


@dataclass
class NormalMap:
    """Camera-space normals encoded ``n * 0.5 + 0.5``; background pixels are exactly 0."""

    pixels: np.ndarray
    mask: np.ndarray

    def decode(self) -> np.ndarray:
        return np.where(self.mask[..., None], self.pixels * 2.0 - 1.0, 0.0)

    def to_rgba8(self) -> np.ndarray:
        rgb = np.round(np.clip(self.pixels, 0, 1) * 255).astype(np.uint8)
        alpha = (self.mask * 255).astype(np.uint8)
        return np.dstack([rgb, alpha])

    @classmethod
    def from_rgba8(cls, rgba: np.ndarray) -> "NormalMap":
        mask = rgba[..., 3] > 127
        pixels = np.where(mask[..., None], rgba[..., :3].astype(np.float64) / 255.0, 0.0)
        return cls(pixels, mask)


def render_normal_map(mesh: TriangleMesh, cam: CameraPose, size: tuple[int, int] = (32, 32)) -> NormalMap:
    """Flat-shaded camera-space normal map with backface culling."""
    H, W = size
    if H < 8 or W < 8:
        raise ValidationError(f"normal maps must be at least 8x8, got {H}x{W}")
    pts = cam.to_camera(mesh.vertices)
    frags = rasterize(pts, mesh.faces, H, W, cam)
    pixels = np.zeros((H, W, 3))
    mask = frags.mask
    if mask.any():
        n = face_normals(pts, mesh.faces)
        pixels[mask] = n[frags.face_id[mask]] * 0.5 + 0.5
    return NormalMap(pixels, mask)


def export_obj(mesh: TriangleMesh, path: str | Path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path: str | Path) -> TriangleMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64))


def head_to_world(points: np.ndarray, params: BodyParams, scale: float = 1.0) -> np.ndarray:
    """Map head-local points (unit = head radius, facing ``+z``) into world space."""
    yaw, head_yaw = params.pose[0], params.pose[5]
    hc, hr = head_center(params)
    p = (np.asarray(points, dtype=np.float64) * hr * scale) @ _rot_y(head_yaw).T + hc
    p = p @ _rot_y(yaw).T
    p[:, 1] *= params.shape[0]
    return p


def facing_yaw_degrees(params: BodyParams) -> float:
    """Direction the face points, as an azimuth in degrees."""
    return float(np.rad2deg(params.pose[0] + params.pose[5]))
