"""Procedural multi-view avatar scenes.

Each scene samples body parameters, morphable-face coefficients and a colour
palette from a seed, then renders RGB views, body normal maps and face boxes
for the six-view layout. Images are quantized to 8 bit at generation time so
in-memory and on-disk samples are identical.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .body import (DEFAULT_LAYOUT, BodyParams, NormalMap, TriangleMesh, ViewLayout, build_body, camera_for_view,
                   _rot_y, facing_yaw_degrees, head_center, head_to_world, render_normal_map)
from .face import (FaceCoeffs, MorphableFace, build_morphable_face, face_camera, face_shape, face_texture,
                   render_face, shade_vertex_colors)
from .facecrop import FaceBox, select_face_views
from .imageio import quantize, read_png, read_png_uint8, write_png
from .raster import face_normals, rasterize

BACKGROUND = 0.94
FACE_OFFSET = 1.06
_LIGHT = np.array([0.35, 0.55, 1.0]) / np.linalg.norm([0.35, 0.55, 1.0])


@lru_cache(maxsize=4)
def default_face_model(seed: int = 0) -> MorphableFace:
    return build_morphable_face(seed)


@dataclass(eq=False)
class SceneSample:
    seed: int
    body: BodyParams
    face: FaceCoeffs
    images: np.ndarray
    normal_maps: list[NormalMap]
    boxes: list[FaceBox | None]
    input_view: int = 0
    palette: dict = field(default_factory=dict)
    layout: ViewLayout = DEFAULT_LAYOUT

    @property
    def resolution(self) -> int:
        return self.images.shape[1]

    def normal_array(self) -> np.ndarray:
        return np.stack([nm.pixels for nm in self.normal_maps])


def _color(rng, sat=(0.35, 0.8), val=(0.35, 0.85)) -> list[float]:
    return list(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(*sat), rng.uniform(*val)))


def sample_params(rng: np.random.Generator, model: MorphableFace) -> tuple[BodyParams, FaceCoeffs, dict]:
    shape = np.clip(1.0 + 0.08 * rng.standard_normal(4), 0.85, 1.15)
    pose = [rng.uniform(-0.25, 0.25), rng.uniform(-0.2, 0.5), rng.uniform(-0.2, 0.5),
            rng.uniform(-0.1, 0.25), rng.uniform(-0.1, 0.25), rng.uniform(-0.2, 0.2)]
    d_id, d_exp, d_t = model.dims
    coeffs = FaceCoeffs(*(np.clip(std * rng.standard_normal(d), -3, 3)
                          for d, std in ((d_id, 0.4), (d_exp, 0.4), (d_t, 0.5))))
    skin = colorsys.hsv_to_rgb(rng.uniform(0.03, 0.09), rng.uniform(0.3, 0.6), rng.uniform(0.45, 0.9))
    palette = {"shirt": _color(rng), "pants": _color(rng, val=(0.2, 0.6)), "skin": list(skin),
               "hair": _color(rng, sat=(0.3, 0.7), val=(0.1, 0.4))}
    return BodyParams(tuple(shape), tuple(pose)), coeffs, palette


def scene_mesh(body: BodyParams, coeffs: FaceCoeffs, palette: dict, model: MorphableFace) -> tuple[TriangleMesh, TriangleMesh]:
    """Coloured body mesh with the morphable face attached, plus the face-only mesh in world space."""
    mesh = build_body(body)
    part_colors = {"torso": "shirt", "head": "skin", "left_arm": "skin", "right_arm": "skin",
                   "left_leg": "pants", "right_leg": "pants"}
    colors = np.zeros_like(mesh.vertices)
    for i, name in enumerate(mesh.part_names):
        vidx = np.unique(mesh.faces[mesh.part_of_face == i])
        colors[vidx] = palette[part_colors[name]]
    # hair: back and top of the head sphere
    head_idx = np.unique(mesh.faces[mesh.part_of_face == mesh.part_names.index("head")])
    local = _head_local(mesh.vertices[head_idx], body)
    hair = (local[:, 2] < 0.1) | (local[:, 1] > 0.55)
    colors[head_idx[hair]] = palette["hair"]
    mesh.colors = colors

    verts = head_to_world(face_shape(model, coeffs.alpha, coeffs.beta).reshape(-1, 3), body, FACE_OFFSET)
    tex = np.clip(face_texture(model, coeffs.delta).reshape(-1, 3), 0, 1)
    face = TriangleMesh(verts, model.faces, tex)
    full = TriangleMesh.concat([mesh, face], tuple(mesh.part_names) + ("face",))
    full.part_of_face = np.concatenate([mesh.part_of_face, np.full(len(model.faces), len(mesh.part_names))])
    return full, face


def _head_local(points: np.ndarray, body: BodyParams) -> np.ndarray:
    p = np.array(points, dtype=np.float64)
    p[:, 1] /= body.shape[0]
    p = p @ _rot_y(body.pose[0])
    hc, hr = head_center(body)
    return ((p - hc) @ _rot_y(body.pose[5])) / hr


def render_rgb(mesh: TriangleMesh, cam, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Headlight-shaded vertex colours over a light background; returns (image, face_id map)."""
    pts = cam.to_camera(mesh.vertices)
    frags = rasterize(pts, mesh.faces, size, size, cam)
    img = np.full((size, size, 3), BACKGROUND)
    m = frags.mask
    if m.any():
        albedo = shade_vertex_colors(frags, mesh.faces, mesh.colors)[m]
        n = face_normals(pts, mesh.faces)[frags.face_id[m]]
        img[m] = albedo * (0.45 + 0.55 * np.clip(n @ _LIGHT, 0, None))[:, None]
    return img, frags.face_id


def face_box_from_render(face_id: np.ndarray, face_faces: np.ndarray) -> FaceBox | None:
    ys, xs = np.nonzero(np.isin(face_id, face_faces))
    if ys.size == 0:
        return None
    return FaceBox(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1),
                   1.0, "ground-truth")


def generate_scene(seed: int, resolution: int = 32, layout: ViewLayout = DEFAULT_LAYOUT,
                   model: MorphableFace | None = None) -> SceneSample:
    model = model or default_face_model()
    rng = np.random.default_rng(seed)
    body, coeffs, palette = sample_params(rng, model)
    return render_scene(seed, body, coeffs, palette, resolution, layout, model)


def render_scene(seed: int, body: BodyParams, coeffs: FaceCoeffs, palette: dict, resolution: int = 32,
                 layout: ViewLayout = DEFAULT_LAYOUT, model: MorphableFace | None = None) -> SceneSample:
    model = model or default_face_model()
    full, _ = scene_mesh(body, coeffs, palette, model)
    body_mesh = build_body(body)
    face_part = len(full.part_names) - 1
    face_faces = np.nonzero(full.part_of_face == face_part)[0]
    face_views = set(select_face_views(layout))
    images, normals, boxes = [], [], []
    for v in range(len(layout.azimuths)):
        cam = camera_for_view(v, layout)
        img, fid = render_rgb(full, cam, resolution)
        images.append(quantize(img))
        nm = render_normal_map(body_mesh, cam, (resolution, resolution))
        normals.append(NormalMap.from_rgba8(nm.to_rgba8()))
        boxes.append(face_box_from_render(fid, face_faces) if v in face_views else None)
    return SceneSample(seed, body, coeffs, np.stack(images), normals, boxes, 0, palette, layout)


def face_renders(sample: SceneSample, view_ids, size: int = 32, model: MorphableFace | None = None) -> np.ndarray:
    """Isolated morphable-face renders for the given views, posed relative to the face direction."""
    model = model or default_face_model()
    shape = face_shape(model, sample.face.alpha, sample.face.beta)
    tex = face_texture(model, sample.face.delta)
    yaw = facing_yaw_degrees(sample.body)
    out = []
    for v in view_ids:
        pose = face_camera(sample.layout.azimuths[v] - yaw, sample.layout.elevation)
        out.append(render_face(shape, tex, pose, size, model.faces).image)
    return np.stack(out)


def write_scene(sample: SceneSample, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, (img, nm) in enumerate(zip(sample.images, sample.normal_maps)):
        write_png(d / f"view_{i}.png", img)
        write_png(d / f"normal_{i}.png", nm.to_rgba8())
    with open(d / "boxes.jsonl", "w") as fh:
        for i, box in enumerate(sample.boxes):
            fh.write(json.dumps({"view": i, "box": box.to_dict() if box else None}, sort_keys=True) + "\n")
    params = {"seed": sample.seed, "body": sample.body.to_dict(), "face": sample.face.to_dict(),
              "palette": sample.palette, "input_view": sample.input_view, "resolution": sample.resolution,
              "azimuths": list(sample.layout.azimuths)}
    (d / "params.json").write_text(json.dumps(params, indent=2, sort_keys=True))
    return d


def read_boxes(path: str | Path) -> dict[int, FaceBox | None]:
    boxes = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            boxes[int(rec["view"])] = FaceBox.from_dict(rec["box"]) if rec.get("box") else None
    return boxes


def read_params(path: str | Path) -> tuple[BodyParams, FaceCoeffs | None, dict]:
    p = json.loads(Path(path).read_text())
    body = BodyParams.from_dict(p["body"] if "body" in p else p)
    face = FaceCoeffs.from_dict(p["face"]) if "face" in p else None
    return body, face, p


def read_scene(directory: str | Path) -> SceneSample:
    d = Path(directory)
    body, face, p = read_params(d / "params.json")
    layout = ViewLayout(azimuths=tuple(p.get("azimuths", DEFAULT_LAYOUT.azimuths)))
    n = len(layout.azimuths)
    images = np.stack([read_png(d / f"view_{i}.png") for i in range(n)])
    normals = [NormalMap.from_rgba8(read_png_uint8(d / f"normal_{i}.png")) for i in range(n)]
    boxes = read_boxes(d / "boxes.jsonl")
    return SceneSample(int(p["seed"]), body, face, images, normals, [boxes.get(i) for i in range(n)],
                       int(p.get("input_view", 0)), p.get("palette", {}), layout)
