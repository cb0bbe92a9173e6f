"""Inference: six-view generation from one image, then face refinement on the three face views."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .body import (DEFAULT_LAYOUT, BodyParams, NormalMap, ViewLayout, build_body, camera_for_view, facing_yaw_degrees,
                   render_normal_map)
from .data import default_face_model
from .diffusion import build_schedule, ddim_sample
from .errors import ShapeError, ValidationError
from .face import FaceCoeffs, face_camera, face_shape, face_texture, render_face
from .facecrop import (FaceBox, FaceCrop, GroundTruthProvider, crop_and_upscale, detect_face, paste_back,
                       select_face_views)
from .model import BodyCondition, BodyDenoiser, FaceCondition, FaceDenoiser, HumanMV, from_latent, to_latent

log = logging.getLogger(__name__)

DEFAULT_STEPS = 50
DEFAULT_CFG = 3.0


def body_normal_maps(params: BodyParams, resolution: int, layout: ViewLayout = DEFAULT_LAYOUT) -> list[NormalMap]:
    """Normal maps of the parametric body for every layout view, passed through the 8-bit encoding."""
    mesh = build_body(params)
    maps = []
    for v in range(len(layout.azimuths)):
        nm = render_normal_map(mesh, camera_for_view(v, layout), (resolution, resolution))
        maps.append(NormalMap.from_rgba8(nm.to_rgba8()))
    return maps


def _normals_tensor(normal_maps: Sequence[NormalMap]) -> torch.Tensor:
    return torch.as_tensor(np.stack([nm.decode() for nm in normal_maps]), dtype=torch.float32).movedim(-1, -3)


def _noise(shape, seed: int) -> torch.Tensor:
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed))


def generate_views(model: HumanMV, reference: np.ndarray, normal_maps: Sequence[NormalMap] | None,
                   seed: int = 0, steps: int = DEFAULT_STEPS, cfg_scale: float = DEFAULT_CFG,
                   transfer: bool = True, view_ids: Sequence[int] | None = None) -> np.ndarray:
    """Stage 1: ``(V, H, W, 3)`` views in ``[0, 1]`` from a reference image ``(H, W, 3)``."""
    reference = np.asarray(reference, dtype=np.float64)
    if reference.ndim != 3 or reference.shape[2] != 3:
        raise ShapeError(f"reference must be (H, W, 3), got {reference.shape}")
    H, W = reference.shape[:2]
    V = len(view_ids) if view_ids is not None else (len(normal_maps) if normal_maps is not None
                                                    else model.config.denoiser.num_views)
    view_ids = tuple(view_ids) if view_ids is not None else tuple(range(V))
    normals = None
    if normal_maps is not None:
        if len(normal_maps) != V or normal_maps[0].pixels.shape[:2] != (H, W):
            raise ShapeError(f"need {V} normal maps at {H}x{W}")
        normals = _normals_tensor(normal_maps)[None]
    cond = BodyCondition(to_latent(reference)[None], normals, view_ids, transfer=transfer)
    xT = _noise((1, V, 3, H, W), seed)
    with torch.no_grad():
        x0 = ddim_sample(BodyDenoiser(model), xT, cond, build_schedule(), steps, cfg_scale=cfg_scale, clip=1.0)
    return from_latent(x0[0])


@dataclass
class FaceRefinement:
    views: np.ndarray
    view_ids: tuple[int, ...]
    crops: dict[int, FaceCrop] = field(default_factory=dict)
    refined: dict[int, np.ndarray] = field(default_factory=dict)


def face_render_images(coeffs: FaceCoeffs | None, body: BodyParams | None, view_ids: Sequence[int], size: int,
                       layout: ViewLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """Morphable-face renders posed like each view; the mean face when no coefficients are known."""
    model = default_face_model()
    coeffs = coeffs or FaceCoeffs.zeros(model)
    yaw = facing_yaw_degrees(body) if body is not None else 0.0
    shape = face_shape(model, coeffs.alpha, coeffs.beta)
    tex = face_texture(model, coeffs.delta)
    return np.stack([render_face(shape, tex, face_camera(layout.azimuths[v] - yaw, layout.elevation), size,
                                 model.faces).image for v in view_ids])


def sample_faces(model: HumanMV, guides: np.ndarray, renders: np.ndarray, id_crop: np.ndarray,
                 view_ids: Sequence[int], seed: int = 0, steps: int = DEFAULT_STEPS,
                 cfg_scale: float = DEFAULT_CFG) -> np.ndarray:
    """Jointly denoise ``V`` face crops ``(V, S, S, 3)`` from guide crops, face renders and an ID crop."""
    guides, renders = np.asarray(guides), np.asarray(renders)
    size = model.config.face_resolution
    if guides.shape != (len(view_ids), size, size, 3) or renders.shape != guides.shape:
        raise ShapeError(f"expected guides and renders of shape {(len(view_ids), size, size, 3)}")
    cond = FaceCondition(to_latent(guides)[None], to_latent(renders)[None], to_latent(id_crop)[None],
                         tuple(view_ids))
    xT = _noise((1, len(view_ids), 3, size, size), seed)
    with torch.no_grad():
        x0 = ddim_sample(FaceDenoiser(model), xT, cond, build_schedule(), steps, cfg_scale=cfg_scale, clip=1.0)
    return from_latent(x0[0])


def refine_faces(model: HumanMV, views: np.ndarray, boxes: Sequence[FaceBox | None] | dict,
                 coeffs: FaceCoeffs | None = None, body: BodyParams | None = None,
                 id_image: np.ndarray | None = None, seed: int = 0, steps: int = DEFAULT_STEPS,
                 cfg_scale: float = DEFAULT_CFG, layout: ViewLayout = DEFAULT_LAYOUT) -> FaceRefinement:
    """Stage 2: detect, crop, jointly refine and paste back the faces of the front views.

    ``boxes`` feed the ground-truth detection provider per view. Views
    without a detected face are left untouched. ``id_image`` is the image
    the identity embedding is taken from (default: the front view).
    """
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 4 or views.shape[0] != len(layout.azimuths):
        raise ShapeError(f"expected {len(layout.azimuths)} views (V, H, W, 3), got {views.shape}")
    get = boxes.get if isinstance(boxes, dict) else (lambda v: boxes[v] if v < len(boxes) else None)
    size = model.config.face_resolution
    front = select_face_views(layout)[0]
    crops: dict[int, FaceCrop] = {}
    for v in select_face_views(layout):
        box = get(v)
        found = detect_face(views[v], GroundTruthProvider([box] if box is not None else []))
        if found is None:
            log.info("no face detected in view %d; left unrefined", v)
            continue
        crops[v] = crop_and_upscale(views[v], found, size)
    out = views.copy()
    if not crops:
        return FaceRefinement(out, ())
    ids = tuple(crops)
    id_src = views[front] if id_image is None else np.asarray(id_image, dtype=np.float64)
    id_box = get(front)
    if id_box is None:
        id_box = crops[ids[0]].box
    id_crop = np.clip(crop_and_upscale(id_src, id_box, size).image, 0.0, 1.0)
    guide = np.clip(np.stack([crops[v].image for v in ids]), 0.0, 1.0)
    renders = face_render_images(coeffs, body, ids, size, layout)
    refined = sample_faces(model, guide, renders, id_crop, ids, seed, steps, cfg_scale)
    result = FaceRefinement(out, ids, crops)
    for i, v in enumerate(ids):
        result.refined[v] = refined[i]
        out[v] = paste_back(views[v], refined[i], crops[v])
    return result


@dataclass
class InferenceResult:
    coarse: np.ndarray
    views: np.ndarray
    faces: FaceRefinement | None


def infer(body_model: HumanMV, reference: np.ndarray, params: BodyParams, face_model: HumanMV | None = None,
          boxes: Sequence[FaceBox | None] | dict | None = None, coeffs: FaceCoeffs | None = None,
          seed: int = 0, steps: int = DEFAULT_STEPS, cfg_scale: float = DEFAULT_CFG,
          layout: ViewLayout = DEFAULT_LAYOUT) -> InferenceResult:
    """Full pipeline: stage 1 over all views, then stage 2 on the face views when a face model is given."""
    params.validate()
    H = np.asarray(reference).shape[0]
    normals = body_normal_maps(params, H, layout)
    coarse = generate_views(body_model, reference, normals, seed, steps, cfg_scale)
    if face_model is None:
        return InferenceResult(coarse, coarse, None)
    if boxes is None:
        raise ValidationError("face refinement needs face boxes")
    faces = refine_faces(face_model, coarse, boxes, coeffs, params, id_image=reference, seed=seed + 1,
                         steps=steps, cfg_scale=cfg_scale, layout=layout)
    return InferenceResult(coarse, faces.views, faces)
