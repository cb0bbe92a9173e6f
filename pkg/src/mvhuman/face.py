"""Morphable face prior: shape/texture model, pose-conditioned rendering and feature fusion.

The face mesh is the front cap of a subdivided icosphere, stretched and given
a nose. Identity, expression and texture bases are seeded smooth random fields
orthonormalized by QR. Geometry is expressed in head-local units (sphere
radius 1), looking down ``+z``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container
from .denoiser import ResBlock
from .errors import ShapeError, ValidationError
from .raster import CameraPose, rasterize

COEFF_LIMIT = 3.0
FACE_RADIUS = 4.0
FACE_FOCAL = 1.15


def icosphere(subdivisions: int = 3) -> tuple[np.ndarray, np.ndarray]:
    phi = (1 + 5**0.5) / 2
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts), np.array(faces, dtype=np.int64)


@dataclass(eq=False)
class MorphableFace:
    """Mean shape/texture plus PCA-style bases; all vectors are flattened ``3K``."""

    mean_shape: np.ndarray
    id_basis: np.ndarray
    exp_basis: np.ndarray
    mean_texture: np.ndarray
    tex_basis: np.ndarray
    faces: np.ndarray

    @property
    def num_vertices(self) -> int:
        return self.mean_shape.size // 3

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.id_basis.shape[1], self.exp_basis.shape[1], self.tex_basis.shape[1]

    def validate(self) -> None:
        n = self.mean_shape.size
        for name in ("id_basis", "exp_basis", "tex_basis"):
            if getattr(self, name).shape[0] != n:
                raise ShapeError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if self.mean_texture.size != n or n % 3:
            raise ShapeError("mean texture / mean shape sizes inconsistent")

    def save(self, path: str | Path) -> None:
        container.save(path, {
            "mean_shape": self.mean_shape, "id_basis": self.id_basis, "exp_basis": self.exp_basis,
            "mean_texture": self.mean_texture, "tex_basis": self.tex_basis,
            "faces": self.faces.astype(np.int64),
        }, {"kind": "morphable_face", "num_vertices": self.num_vertices, "dims": list(self.dims)})

    @classmethod
    def load(cls, path: str | Path) -> "MorphableFace":
        t, meta = container.load(path)
        if meta.get("kind") != "morphable_face":
            raise ValidationError(f"{path} is not a morphable face container")
        f64 = {k: v.astype(np.float64) for k, v in t.items() if k != "faces"}
        return cls(faces=t["faces"].astype(np.int64), **f64)


@dataclass(frozen=True)
class FaceCoeffs:
    alpha: np.ndarray
    beta: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        for name in ("alpha", "beta", "delta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def validate(self) -> None:
        for name in ("alpha", "beta", "delta"):
            v = getattr(self, name)
            if not np.all(np.isfinite(v)):
                raise ValidationError(f"{name} has non-finite entries")
            if np.any(np.abs(v) > COEFF_LIMIT):
                raise ValidationError(f"{name} exceeds the prior range +-{COEFF_LIMIT}")

    @classmethod
    def zeros(cls, model: MorphableFace) -> "FaceCoeffs":
        d_id, d_exp, d_t = model.dims
        return cls(np.zeros(d_id), np.zeros(d_exp), np.zeros(d_t))

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "beta": self.beta.tolist(), "delta": self.delta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FaceCoeffs":
        return cls(d["alpha"], d["beta"], d["delta"])


def _orthonormal(rng: np.random.Generator, points: np.ndarray, cols: int, features: int = 6) -> np.ndarray:
    """Seeded smooth random fields over the vertices (one per column), orthonormalized by QR.

    Each column is a sum of low-frequency random cosines per coordinate, so a
    coefficient moves whole regions of the face coherently instead of jittering
    single vertices.
    """
    xy = points[:, :2]
    cols_ = []
    for _ in range(cols):
        freq = rng.normal(0.0, 1.5, size=(3, features, 2))
        phase = rng.uniform(0.0, 2 * np.pi, size=(3, features))
        amp = rng.standard_normal((3, features))
        field = np.einsum("cf,vcf->vc", amp, np.cos(np.einsum("vd,cfd->vcf", xy, freq) + phase))
        cols_.append(field.reshape(-1))
    q, r = np.linalg.qr(np.stack(cols_, axis=1))
    return q * np.sign(np.diag(r))


def build_morphable_face(seed: int = 0, d_id: int = 8, d_exp: int = 4, d_t: int = 8,
                         subdivisions: int = 3, cap: float = 0.4) -> MorphableFace:
    verts, faces = icosphere(subdivisions)
    keep = verts[:, 2] > cap
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[keep] = np.arange(keep.sum())
    faces = remap[faces[np.all(keep[faces], axis=1)]]
    v = verts[keep].copy()
    x, y = v[:, 0], v[:, 1]
    v[:, 1] *= 1.15
    v[:, 2] += 0.22 * np.exp(-(x**2 + (y + 0.05) ** 2) / 0.015)

    skin = np.array([0.86, 0.68, 0.56])
    tex = np.tile(skin, (len(v), 1))
    for ex in (-0.32, 0.32):
        w = np.exp(-((x - ex) ** 2 + (y - 0.22) ** 2) / 0.01)[:, None]
        tex = tex * (1 - w) + np.array([0.12, 0.09, 0.08]) * w
    w = np.exp(-(x**2 / 0.04 + (y + 0.42) ** 2 / 0.004))[:, None]
    tex = tex * (1 - w) + np.array([0.72, 0.22, 0.24]) * w

    rng = np.random.default_rng(seed)
    return MorphableFace(
        mean_shape=v.reshape(-1), id_basis=_orthonormal(rng, v, d_id), exp_basis=_orthonormal(rng, v, d_exp),
        mean_texture=tex.reshape(-1), tex_basis=_orthonormal(rng, v, d_t), faces=faces,
    )


def face_shape(model: MorphableFace, alpha, beta) -> np.ndarray:
    alpha, beta = np.asarray(alpha, dtype=np.float64), np.asarray(beta, dtype=np.float64)
    if alpha.shape != (model.id_basis.shape[1],) or beta.shape != (model.exp_basis.shape[1],):
        raise ShapeError(f"coefficient shapes {alpha.shape}, {beta.shape} do not match bases {model.dims[:2]}")
    return model.mean_shape + model.id_basis @ alpha + model.exp_basis @ beta


def face_texture(model: MorphableFace, delta) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (model.tex_basis.shape[1],):
        raise ShapeError(f"texture coefficients {delta.shape} do not match basis width {model.dims[2]}")
    return model.mean_texture + model.tex_basis @ delta


@dataclass
class FaceRender:
    image: np.ndarray
    mask: np.ndarray


def face_camera(azimuth: float, elevation: float = 0.0) -> CameraPose:
    """Pose used to render an isolated face so that it fills the frame."""
    return CameraPose(azimuth, elevation, FACE_RADIUS, FACE_FOCAL)


def shade_vertex_colors(frags, faces: np.ndarray, colors: np.ndarray) -> np.ndarray:
    """Perspective-correct interpolation written as ``c0 + b1 (c1 - c0) + b2 (c2 - c0)``
    so uniform colours are reproduced exactly."""
    H, W = frags.face_id.shape
    out = np.zeros((H, W, 3))
    m = frags.mask
    tri = faces[frags.face_id[m]]
    c0, c1, c2 = colors[tri[:, 0]], colors[tri[:, 1]], colors[tri[:, 2]]
    b = frags.bary[m]
    out[m] = c0 + b[:, 1:2] * (c1 - c0) + b[:, 2:3] * (c2 - c0)
    return out


def render_face(shape: np.ndarray, texture: np.ndarray, pose: CameraPose, size: int | tuple[int, int],
                faces: np.ndarray, background: float = 0.0) -> FaceRender:
    """Rasterize the face mesh with per-vertex albedo; background is black with mask 0."""
    H, W = (size, size) if isinstance(size, int) else size
    verts = np.asarray(shape, dtype=np.float64).reshape(-1, 3)
    colors = np.clip(np.asarray(texture, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    if colors.shape != verts.shape:
        raise ShapeError("texture and shape describe different vertex counts")
    if pose.radius <= np.linalg.norm(verts, axis=1).max():
        raise ValidationError("camera lies inside the face geometry")
    frags = rasterize(pose.to_camera(verts), faces, H, W, pose)
    img = shade_vertex_colors(frags, faces, colors)
    img[~frags.mask] = background
    return FaceRender(img, frags.mask)


class FaceEncoder3D(nn.Module):
    """Residual conv stack turning a face render into a grid of feature tokens."""

    def __init__(self, width: int = 32, channels: int = 16, resolution: int = 32, downsamples: int = 2):
        super().__init__()
        self.resolution = resolution
        self.width = width
        self.conv_in = nn.Conv2d(3, channels, 3, padding=1)
        blocks = []
        c = channels
        for _ in range(downsamples):
            blocks += [ResBlock(c, c, None, groups=4, zero_init=True), nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)]
            c *= 2
        self.blocks = nn.ModuleList(blocks)
        self.final = ResBlock(c, c, None, groups=4, zero_init=True)
        self.to_tokens = nn.Conv2d(c, width, 1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        """``(..., 3, S, S)`` images in [-1, 1] to ``(..., n, width)`` tokens."""
        if img.shape[-3:] != (3, self.resolution, self.resolution):
            raise ShapeError(f"face render must be 3x{self.resolution}x{self.resolution}, got {tuple(img.shape[-3:])}")
        lead = img.shape[:-3]
        h = self.conv_in(img.reshape(-1, *img.shape[-3:]))
        for blk in self.blocks:
            h = blk(h)
        h = self.to_tokens(self.final(h))
        tokens = h.flatten(2).transpose(1, 2)
        return tokens.reshape(*lead, *tokens.shape[1:])


class IdEncoder(nn.Module):
    """Identity embedding of a face crop: frozen random conv features, unit-normalized."""

    def __init__(self, dim: int = 32, channels: int = 16, resolution: int = 32):
        super().__init__()
        self.resolution = resolution
        self.net = nn.Sequential(
            nn.Conv2d(3, channels, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(channels, 2 * channels, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * channels, 2 * channels, 3, padding=1),
        )
        self.proj = nn.Linear(4 * channels, dim)
        self.requires_grad_(False)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.shape[-3:] != (3, self.resolution, self.resolution):
            raise ShapeError(f"face crop must be 3x{self.resolution}x{self.resolution}, got {tuple(img.shape[-3:])}")
        lead = img.shape[:-3]
        h = self.net(img.reshape(-1, *img.shape[-3:]))
        # mean and max pooling keep the embedding sensitive to localized structure
        pooled = torch.cat([h.mean(dim=(-2, -1)), h.amax(dim=(-2, -1))], dim=-1)
        e = F.normalize(self.proj(pooled), dim=-1)
        return e.reshape(*lead, -1)


class FaceFusion(nn.Module):
    """Two MLP layers over ``[f2d || f3d_token]`` producing the aligned face tokens."""

    def __init__(self, id_dim: int = 32, feat_dim: int = 32, hidden: int = 64, token_width: int = 32):
        super().__init__()
        self.id_dim, self.feat_dim = id_dim, feat_dim
        self.fc1 = nn.Linear(id_dim + feat_dim, hidden)
        self.fc2 = nn.Linear(hidden, token_width)

    def forward(self, f2d: torch.Tensor, f3d: torch.Tensor) -> torch.Tensor:
        """``f2d`` ``(..., id_dim)``, ``f3d`` ``(..., n, feat_dim)`` -> ``(..., n, token_width)``."""
        if f2d.shape[-1] != self.id_dim or f3d.shape[-1] != self.feat_dim:
            raise ShapeError(f"fusion widths ({f2d.shape[-1]}, {f3d.shape[-1]}) != ({self.id_dim}, {self.feat_dim})")
        ids = f2d[..., None, :].expand(*f3d.shape[:-1], f2d.shape[-1])
        return self.fc2(F.gelu(self.fc1(torch.cat([ids, f3d], dim=-1))))


@dataclass(eq=False)
class FaceEmbeddings:
    f2d: torch.Tensor
    f3d: torch.Tensor
    f_align: torch.Tensor


def encode_3d(encoder: FaceEncoder3D, i3d: torch.Tensor) -> torch.Tensor:
    return encoder(i3d)


def encode_id(encoder: IdEncoder, face_image: torch.Tensor) -> torch.Tensor:
    return encoder(face_image)


def fuse(fusion: FaceFusion, f2d: torch.Tensor, f3d: torch.Tensor) -> torch.Tensor:
    return fusion(f2d, f3d)
