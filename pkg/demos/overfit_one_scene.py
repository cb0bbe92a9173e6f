"""Overfit both training phases on a single scene, then run the two-stage pipeline and score it.

This is the acceptance recipe at full length (about a quarter of an hour on
one CPU core); pass smaller --body-steps / --face-steps for a quick look.

    python3 demos/overfit_one_scene.py --out runs/overfit
"""

import argparse
import time
from pathlib import Path

import numpy as np

from mvhuman.data import generate_scene
from mvhuman.facecrop import crop_and_upscale
from mvhuman.imageio import write_png
from mvhuman.metrics import evaluate_images, psnr
from mvhuman.model import load_checkpoint
from mvhuman.pipeline import infer
from mvhuman.train import TrainConfig, train_body_phase, train_face_phase


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scene", type=int, default=0)
    ap.add_argument("--body-steps", type=int, default=3000)
    ap.add_argument("--face-steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--out", default="runs/overfit")
    args = ap.parse_args()
    out = Path(args.out)
    recipe = dict(lr=args.lr, lr_schedule="cosine", warmup=200, log_every=250, data_seed=args.scene)

    t0 = time.perf_counter()
    body = train_body_phase(TrainConfig(steps=args.body_steps, batch_size=2, out=str(out), **recipe))
    face = train_face_phase(TrainConfig(phase="face", steps=args.face_steps, batch_size=1, out=str(out), **recipe), body.checkpoint)
    print(f"trained in {(time.perf_counter() - t0) / 60:.1f} min")

    scene = generate_scene(args.scene, 32)
    body_model, _ = load_checkpoint(body.checkpoint)
    face_model, _ = load_checkpoint(face.checkpoint)
    res = infer(body_model, scene.images[0], scene.body, face_model, dict(enumerate(scene.boxes)), scene.face)

    for name, views in (("coarse", res.coarse), ("refined", res.views)):
        report = evaluate_images(list(views), list(scene.images))
        print(name, {k: round(v, 4) for k, v in report.means().items()})
    for v, crop in res.faces.refined.items():
        gt = np.clip(crop_and_upscale(scene.images[v], scene.boxes[v], crop.shape[0]).image, 0, 1)
        print(f"view {v} face crop PSNR {psnr(crop, gt):.2f} dB")
    write_png(out / "comparison.png", np.concatenate([np.concatenate(list(scene.images), 1),
                                                      np.concatenate(list(res.coarse), 1),
                                                      np.concatenate(list(res.views), 1)], 0))
    print(f"wrote {out / 'comparison.png'} (rows: ground truth, stage 1, stage 2)")


if __name__ == "__main__":
    main()
