"""Two-phase training: body representation (six views), then face representation (three crops).

All randomness (scene choice, condition dropout, timesteps, noise) is drawn
from one seeded ``torch.Generator``, so a config plus seed fixes the run.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import SceneSample, default_face_model, face_renders, generate_scene, read_scene
from .denoiser import DenoiserConfig
from .diffusion import build_schedule, ddpm_loss
from .errors import ConfigError, NumericError, ValidationError
from .facecrop import crop_and_upscale, resize, select_face_views
from .model import (BodyCondition, BodyDenoiser, FaceCondition, FaceDenoiser, HumanMV, ModelConfig, build_model,
                    load_checkpoint, save_checkpoint, to_latent)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    phase: str = "body"
    steps: int = 3000
    batch_size: int = 4
    lr: float = 1e-4
    lr_schedule: str = "constant"
    warmup: int = 0
    cond_dropout: float = 0.1
    seed: int = 0
    resolution: int = 32
    views: int = 6
    scenes: int = 1
    data_seed: int = 0
    data: str = ""
    out: str = "runs/train"
    body_ckpt: str = ""
    face_resolution: int = 32
    base_channels: int = 32
    channel_mult: str = "1,2,2"
    attention_levels: str = "2"
    heads: int = 4
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.phase not in ("body", "face"):
            raise ConfigError(f"phase must be 'body' or 'face', got {self.phase!r}")
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        r = self.resolution
        if r < 16 or r & (r - 1):
            raise ConfigError(f"resolution must be a power of two >= 16, got {r}")
        if self.steps < 0 or self.batch_size < 1 or self.scenes < 1:
            raise ConfigError("steps must be >= 0, batch_size and scenes >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.warmup < 0:
            raise ConfigError(f"warmup must be >= 0, got {self.warmup}")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ConfigError(f"cond_dropout must lie in [0, 1], got {self.cond_dropout}")
        if not 1 <= self.views <= 6:
            raise ConfigError(f"views must lie in [1, 6], got {self.views}")

    def model_config(self) -> ModelConfig:
        ints = lambda s: tuple(int(v) for v in str(s).split(",") if v.strip())
        dn = DenoiserConfig(base_channels=self.base_channels, channel_mult=ints(self.channel_mult),
                            attention_levels=ints(self.attention_levels), heads=self.heads)
        return ModelConfig(denoiser=dn, face_resolution=self.face_resolution)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name: str, value: str):
    kind = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    if name not in kind:
        raise ConfigError(f"unknown config key {name!r}")
    t = kind[name]
    if t in ("int", int):
        return int(value)
    if t in ("float", float):
        return float(value)
    return value


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigError(f"line {n}: bad value for {key}: {value!r}") from exc
    return out


def load_config(path: str | Path | None = None, **overrides) -> TrainConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def condition_dropout(cond, p: float, rng: torch.Generator):
    """Mark each sample as null with probability ``p`` (sets ``cond.dropped``).

    One uniform draw per sample is always consumed, so the generator stream
    does not depend on ``p``.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1], got {p}")
    B = _batch_size(cond)
    u = torch.rand(B, generator=rng, dtype=torch.float64)
    if p == 0.0:
        return cond
    return dataclasses.replace(cond, dropped=u < p)


def _batch_size(cond) -> int:
    for f in dataclasses.fields(cond):
        v = getattr(cond, f.name)
        if isinstance(v, torch.Tensor) and f.name != "dropped":
            return v.shape[0]
    raise ValidationError("condition carries no tensors to infer the batch size from")


# -- data -----------------------------------------------------------------------
def load_scenes(cfg: TrainConfig) -> list[SceneSample]:
    if cfg.data:
        root = Path(cfg.data)
        if (root / "params.json").exists():
            return [read_scene(root)]
        dirs = sorted(p for p in root.iterdir() if (p / "params.json").exists())
        if not dirs:
            raise ValidationError(f"no scenes under {root}")
        return [read_scene(p) for p in dirs]
    return [generate_scene(cfg.data_seed + i, cfg.resolution) for i in range(cfg.scenes)]


def body_tensors(scenes: list[SceneSample], views: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stacked view latents ``(N, V, 3, H, W)``, normal maps in ``[-1, 1]`` and reference views."""
    x0 = torch.stack([to_latent(s.images[:views]) for s in scenes])
    normals = torch.stack([torch.as_tensor(np.stack([nm.decode() for nm in s.normal_maps[:views]]),
                                           dtype=torch.float32).movedim(-1, -3) for s in scenes])
    ref = torch.stack([to_latent(s.images[s.input_view]) for s in scenes])
    return x0, normals, ref


def degrade(crop: np.ndarray, factor: int = 2) -> np.ndarray:
    """Bicubic down/up round trip standing in for a coarse first-stage face."""
    h, w = crop.shape[:2]
    return resize(resize(crop, h // factor, w // factor), h, w)


@dataclass
class FaceExample:
    targets: np.ndarray
    guides: np.ndarray
    renders: np.ndarray
    view_ids: tuple[int, ...]


def face_example(sample: SceneSample, size: int = 32) -> FaceExample | None:
    """Ground-truth crops, degraded guides and morphable-face renders for the three face views."""
    view_ids = select_face_views(sample.layout)
    if any(sample.boxes[v] is None for v in view_ids):
        return None
    targets = np.stack([crop_and_upscale(sample.images[v], sample.boxes[v], size).image for v in view_ids])
    targets = np.clip(targets, 0.0, 1.0)
    guides = np.stack([degrade(t) for t in targets])
    renders = face_renders(sample, view_ids, size, default_face_model())
    return FaceExample(targets, guides, renders, view_ids)


# -- loops ----------------------------------------------------------------------
class LossLog:
    def __init__(self, path: Path, append: bool = False):
        path.parent.mkdir(parents=True, exist_ok=True)
        new = not (append and path.exists())
        self.fh = open(path, "a" if not new else "w", newline="")
        self.writer = csv.writer(self.fh)
        if new:
            self.writer.writerow(["step", "loss", "phase"])

    def write(self, step: int, loss: float, phase: str) -> None:
        self.writer.writerow([step, f"{loss:.8g}", phase])

    def close(self) -> None:
        self.fh.close()


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list[float] = field(default_factory=list)
    model: HumanMV | None = None


def lr_factor(cfg: TrainConfig, i: int) -> float:
    """Multiplier on ``cfg.lr`` after ``i`` optimizer steps: linear warmup, then constant or cosine to 10%."""
    if i < cfg.warmup:
        return (i + 1) / cfg.warmup
    if cfg.lr_schedule == "constant" or cfg.steps <= cfg.warmup:
        return 1.0
    frac = min(1.0, (i - cfg.warmup) / (cfg.steps - cfg.warmup))
    return 0.1 + 0.45 * (1.0 + math.cos(math.pi * frac))


def _step_loop(cfg, model, params, loss_fn, start_step, out, meta) -> TrainResult:
    torch.use_deterministic_algorithms(True, warn_only=True)
    rng = torch.Generator().manual_seed(cfg.seed + start_step)
    params = list(params)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda i: lr_factor(cfg, i))
    losses = []
    csv_log = LossLog(out / "loss.csv", append=start_step > 0)
    try:
        for step in range(start_step + 1, start_step + cfg.steps + 1):
            try:
                loss = loss_fn(rng)
            except NumericError as exc:
                raise NumericError(f"{exc} (step {step}, seed {cfg.seed}, phase {cfg.phase})") from exc
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step} (seed {cfg.seed}, phase {cfg.phase})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.detach().item())
            csv_log.write(step, losses[-1], cfg.phase)
            if cfg.log_every and step % cfg.log_every == 0:
                recent = losses[-cfg.log_every:]
                log.info("%s step %d loss %.5f", cfg.phase, step, sum(recent) / len(recent))
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"{cfg.phase}_{step:06d}.ckpt", model, {**meta, "step": step})
    finally:
        csv_log.close()
    final = start_step + cfg.steps
    path = save_checkpoint(out / f"{cfg.phase}.ckpt", model, {**meta, "step": final})
    return TrainResult(path, losses, model)


def train_body_phase(cfg: TrainConfig, resume: str | Path | None = None) -> TrainResult:
    if cfg.phase != "body":
        raise ConfigError("train_body_phase needs phase=body")
    out = Path(cfg.out)
    start = 0
    if resume:
        model, meta = load_checkpoint(resume)
        start = int(meta.get("step", 0)) if meta.get("phase") == "body" else 0
    else:
        model = build_model(cfg.model_config(), cfg.seed)
    scenes = load_scenes(cfg)
    x0_all, normals_all, ref_all = body_tensors(scenes, cfg.views)
    view_ids = tuple(range(cfg.views))
    schedule = build_schedule()
    denoiser = BodyDenoiser(model)

    def loss_fn(rng):
        idx = torch.randint(len(scenes), (cfg.batch_size,), generator=rng)
        cond = BodyCondition(ref_all[idx], normals_all[idx], view_ids)
        cond = condition_dropout(cond, cfg.cond_dropout, rng)
        return ddpm_loss(denoiser, x0_all[idx], cond, schedule, rng)

    meta = {"phase": "body", "seed": cfg.seed, "train": cfg.to_dict()}
    return _step_loop(cfg, model, model.phase_parameters("body"), loss_fn, start, out, meta)


def train_face_phase(cfg: TrainConfig, body_checkpoint: str | Path | None = None,
                     resume: str | Path | None = None) -> TrainResult:
    if cfg.phase != "face":
        raise ConfigError("train_face_phase needs phase=face")
    out = Path(cfg.out)
    start = 0
    if resume:
        model, meta = load_checkpoint(resume)
        start = int(meta.get("step", 0)) if meta.get("phase") == "face" else 0
    else:
        source = body_checkpoint or cfg.body_ckpt
        if not source:
            raise ConfigError("the face phase starts from a body checkpoint (body_ckpt)")
        model, _ = load_checkpoint(source)
    size = model.config.face_resolution
    examples = []
    for s in load_scenes(cfg):
        ex = face_example(s, size)
        if ex is None:
            log.warning("scene %d lacks a face box in a face view; skipped", s.seed)
        else:
            examples.append(ex)
    if not examples:
        raise ValidationError("no scene has face boxes in all three face views")
    view_ids = examples[0].view_ids
    x0_all = torch.stack([to_latent(e.targets) for e in examples])
    guide_all = torch.stack([to_latent(e.guides) for e in examples])
    render_all = torch.stack([to_latent(e.renders) for e in examples])
    schedule = build_schedule()
    denoiser = FaceDenoiser(model)

    def loss_fn(rng):
        idx = torch.randint(len(examples), (cfg.batch_size,), generator=rng)
        cond = FaceCondition(guide_all[idx], render_all[idx], x0_all[idx, 0], view_ids)
        cond = condition_dropout(cond, cfg.cond_dropout, rng)
        return ddpm_loss(denoiser, x0_all[idx], cond, schedule, rng)

    meta = {"phase": "face", "seed": cfg.seed, "train": cfg.to_dict()}
    return _step_loop(cfg, model, model.phase_parameters("face"), loss_fn, start, out, meta)


def train(cfg: TrainConfig, resume: str | Path | None = None) -> TrainResult:
    if cfg.phase == "body":
        return train_body_phase(cfg, resume)
    return train_face_phase(cfg, resume=resume)
