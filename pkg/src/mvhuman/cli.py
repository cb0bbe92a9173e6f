"""Command-line interface.

Exit status: 0 on success, 1 for invalid input (bad flags, files or
values), 2 for failures while running.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .body import DEFAULT_LAYOUT
from .data import generate_scene, read_boxes, read_params, write_scene
from .imageio import read_png, write_png
from .metrics import evaluate_images
from .model import load_checkpoint
from .pipeline import DEFAULT_CFG, DEFAULT_STEPS, body_normal_maps, infer, refine_faces
from .train import TrainConfig, _coerce, load_config, train

log = logging.getLogger("mvhuman")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _add_sampling(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS, help="DDIM steps (default 50)")
    p.add_argument("--cfg", type=float, default=DEFAULT_CFG, help="guidance scale (default 3.0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvhuman", description="Multi-view human synthesis on synthetic avatars.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render synthetic scenes to disk")
    p.add_argument("--seeds", type=int, required=True, help="number of scenes")
    p.add_argument("--start", type=int, default=0, help="first seed")
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run the body or face training phase")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--resume", help="checkpoint to continue from")
    for f in dataclasses.fields(TrainConfig):
        kw = {"choices": ["body", "face"]} if f.name == "phase" else {}
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, **kw)

    p = sub.add_parser("infer", help="generate six views (and refine faces) from one image")
    p.add_argument("--ckpt-body", required=True)
    p.add_argument("--ckpt-face")
    p.add_argument("--input", required=True, help="front-view PNG")
    p.add_argument("--body-params", required=True, help="params.json with body (and optional face) parameters")
    p.add_argument("--boxes", help="boxes.jsonl for the face views (default: next to --body-params)")
    p.add_argument("--out", required=True)
    _add_sampling(p)

    p = sub.add_parser("render-normals", help="render body normal maps for the six views")
    p.add_argument("--params", required=True)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="PSNR / SSIM / perceptual distance of predicted vs ground-truth views")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("refine-face", help="stage-2 face refinement of an existing view set")
    p.add_argument("--ckpt-face", required=True)
    p.add_argument("--views", required=True, help="directory with view_{i}.png")
    p.add_argument("--boxes", required=True)
    p.add_argument("--params", help="params.json providing face coefficients and body yaw")
    p.add_argument("--out", required=True)
    _add_sampling(p)
    return parser


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{path} does not exist")
    return p


def _write_views(out: Path, views: np.ndarray, prefix: str = "view") -> None:
    out.mkdir(parents=True, exist_ok=True)
    for i, v in enumerate(views):
        write_png(out / f"{prefix}_{i}.png", v)


def _read_views(d: Path) -> np.ndarray:
    n = len(DEFAULT_LAYOUT.azimuths)
    return np.stack([read_png(_require(str(d / f"view_{i}.png"))) for i in range(n)])


def cmd_gen_data(args) -> None:
    out = Path(args.out)
    for seed in range(args.start, args.start + args.seeds):
        write_scene(generate_scene(seed, args.resolution), out / f"scene_{seed:05d}")
    log.info("wrote %d scenes to %s", args.seeds, out)


def cmd_train(args) -> None:
    overrides = {f.name: _coerce(f.name, getattr(args, f.name)) for f in dataclasses.fields(TrainConfig)
                 if getattr(args, f.name) is not None}
    cfg = load_config(_require(args.config) if args.config else None, **overrides)
    result = train(cfg, resume=_require(args.resume) if args.resume else None)
    print(result.checkpoint)


def cmd_infer(args) -> None:
    params_path = _require(args.body_params)
    body, coeffs, _ = read_params(params_path)
    body.validate()
    reference = read_png(_require(args.input))
    body_model, _ = load_checkpoint(_require(args.ckpt_body))
    face_model = boxes = None
    if args.ckpt_face:
        face_model, _ = load_checkpoint(_require(args.ckpt_face))
        boxes = read_boxes(_require(args.boxes or str(params_path.parent / "boxes.jsonl")))
    result = infer(body_model, reference, body, face_model, boxes, coeffs, seed=args.seed, steps=args.steps,
                   cfg_scale=args.cfg)
    out = Path(args.out)
    _write_views(out, result.views)
    if result.faces is not None:
        _write_views(out, result.coarse, "coarse")


def cmd_render_normals(args) -> None:
    body, _, _ = read_params(_require(args.params))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, nm in enumerate(body_normal_maps(body, args.resolution)):
        write_png(out / f"normal_{i}.png", nm.to_rgba8())


def cmd_evaluate(args) -> None:
    pred_dir, gt_dir = _require(args.pred), _require(args.gt)
    names = sorted(p.name for p in gt_dir.glob("view_*.png"))
    if not names:
        raise FileNotFoundError(f"no view_*.png images in {gt_dir}")
    preds = [read_png(_require(str(pred_dir / n))) for n in names]
    gts = [read_png(gt_dir / n) for n in names]
    report = evaluate_images(preds, gts, names)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(report.to_json())
    print(json.dumps(report.to_dict()["summary"], sort_keys=True))


def cmd_refine_face(args) -> None:
    views = _read_views(_require(args.views))
    boxes = read_boxes(_require(args.boxes))
    body = coeffs = None
    if args.params:
        body, coeffs, _ = read_params(_require(args.params))
    model, _ = load_checkpoint(_require(args.ckpt_face))
    result = refine_faces(model, views, boxes, coeffs, body, seed=args.seed, steps=args.steps,
                          cfg_scale=args.cfg)
    _write_views(Path(args.out), result.views)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer,
            "render-normals": cmd_render_normals, "evaluate": cmd_evaluate, "refine-face": cmd_refine_face}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
