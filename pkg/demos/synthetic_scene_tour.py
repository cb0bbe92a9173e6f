"""Render one synthetic avatar, its normal maps, face crops and morphable-face renders to a PNG sheet.

    python3 demos/synthetic_scene_tour.py --seed 3 --out runs/tour.png
"""

import argparse

import numpy as np

from mvhuman.data import face_renders, generate_scene
from mvhuman.facecrop import crop_and_upscale, select_face_views
from mvhuman.imageio import write_png


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--resolution", type=int, default=64)
    ap.add_argument("--out", default="runs/tour.png")
    args = ap.parse_args()

    s = generate_scene(args.seed, args.resolution)
    R = args.resolution
    views = np.concatenate(list(s.images), axis=1)
    normals = np.concatenate([nm.pixels for nm in s.normal_maps], axis=1)
    faces = []
    ids = select_face_views(s.layout)
    renders = face_renders(s, ids, R)
    for v, render in zip(ids, renders):
        box = s.boxes[v]
        crop = crop_and_upscale(s.images[v], box, R).image if box else np.zeros((R, R, 3))
        faces += [np.clip(crop, 0, 1), render]
    faces = np.concatenate(faces, axis=1)
    sheet = np.zeros((3 * R, 6 * R, 3))
    sheet[:R], sheet[R : 2 * R] = views, normals
    sheet[2 * R :, : faces.shape[1]] = faces
    write_png(args.out, sheet)
    print(f"seed {args.seed}: face boxes {[b.to_dict() if b else None for b in s.boxes]}")
    print(f"wrote {args.out} (rows: views, normal maps, face crop / morphable render pairs)")


if __name__ == "__main__":
    main()
