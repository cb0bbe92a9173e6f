"""The trainable system: reference network, multi-view UNet and all condition encoders.

:class:`HumanMV` owns every parameter of both stages so one checkpoint format
covers them. Its two callables, :class:`BodyDenoiser` and
:class:`FaceDenoiser`, have the ``model(xt, t, cond)`` signature expected by
the diffusion routines; the condition objects they take implement
``as_null()`` for classifier-free guidance.

Images enter the networks in ``[-1, 1]`` (the identity latent space).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import container
from .denoiser import ConditionBundle, ConvEncoder, DenoiserConfig, ImageEncoder, MultiViewUNet
from .diffusion import build_schedule
from .errors import ConfigError, ShapeError, ValidationError
from .face import FaceEncoder3D, FaceFusion, IdEncoder
from .transfer import capture, check_pairing

FORMAT = "mvhuman-checkpoint/1"
_SCHEDULE = build_schedule()


def to_latent(images) -> torch.Tensor:
    """``[0, 1]`` channel-last arrays ``(..., H, W, 3)`` to ``[-1, 1]`` channel-first tensors."""
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    return x.movedim(-1, -3) * 2.0 - 1.0


def from_latent(x: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_latent`, clipped to ``[0, 1]``."""
    return ((x.detach().to(torch.float64).movedim(-3, -1) + 1.0) / 2.0).clamp(0.0, 1.0).numpy()


@dataclass
class ModelConfig:
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    face_resolution: int = 32
    face_channels: int = 16
    id_dim: int = 32
    fusion_hidden: int = 64
    encoder_hidden: int = 16
    head: str = "v"

    def __post_init__(self):
        if isinstance(self.denoiser, dict):
            self.denoiser = DenoiserConfig(**self.denoiser)
        if self.head not in ("eps", "v"):
            raise ConfigError(f"head must be 'eps' or 'v', got {self.head!r}")
        if self.face_resolution < 8 or self.face_resolution % 4:
            raise ConfigError(f"face resolution must be a multiple of 4 and >= 8, got {self.face_resolution}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["denoiser"] = DenoiserConfig(**d["denoiser"])
        return cls(**d)


@dataclass(eq=False)
class BodyCondition:
    """Stage-1 condition: clean reference ``(B, 3, H, W)``, normal maps ``(B, V, 3, H, W)``.

    ``transfer=False`` disables the memory box entirely (no single-view pass).
    """

    reference: torch.Tensor
    normals: torch.Tensor | None
    view_ids: tuple[int, ...]
    dropped: torch.Tensor | None = None
    transfer: bool = True

    def as_null(self) -> "BodyCondition":
        return dataclasses.replace(self, dropped=torch.ones(self.reference.shape[0], dtype=torch.bool))


@dataclass(eq=False)
class FaceCondition:
    """Stage-2 condition for ``V`` face views.

    guide: ``(B, V, 3, S, S)`` coarse crops; renders: ``(B, V, 3, S, S)``
    morphable-face renders; id_image: ``(B, 3, S, S)`` front face crop.
    """

    guide: torch.Tensor
    renders: torch.Tensor
    id_image: torch.Tensor
    view_ids: tuple[int, ...]
    dropped: torch.Tensor | None = None

    def as_null(self) -> "FaceCondition":
        return dataclasses.replace(self, dropped=torch.ones(self.guide.shape[0], dtype=torch.bool))


class HumanMV(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        dn = cfg.denoiser
        self.single_net = MultiViewUNet(dn.single_view())
        check_pairing(self.single_net.config, dn)
        self.unet = MultiViewUNet(dn)
        self.normal_encoder = ConvEncoder(3, dn.cond_channels, cfg.encoder_hidden)
        self.guide_encoder = ConvEncoder(3, dn.cond_channels, cfg.encoder_hidden)
        self.image_encoder = ImageEncoder(3, dn.image_embed_dim, cfg.encoder_hidden)
        self.face_encoder3d = FaceEncoder3D(dn.token_width, cfg.face_channels, cfg.face_resolution)
        self.id_encoder = IdEncoder(cfg.id_dim, cfg.face_channels, cfg.face_resolution)
        self.fusion = FaceFusion(cfg.id_dim, dn.token_width, cfg.fusion_hidden, dn.token_width)

    # -- stage 1 -------------------------------------------------------------
    def body_bundle(self, t: torch.Tensor, cond: BodyCondition) -> ConditionBundle:
        ref = cond.reference
        B = ref.shape[0]
        if ref.ndim != 4:
            raise ShapeError(f"reference must be (B, 3, H, W), got {tuple(ref.shape)}")
        dropped = cond.dropped
        all_dropped = dropped is not None and bool(dropped.all())
        embedding = self.image_encoder(ref)
        normals = None if cond.normals is None else self.normal_encoder(cond.normals)
        memory = None
        if cond.transfer and not all_dropped:
            memory = capture(self.single_net, ref, t, embedding)
        return ConditionBundle(normal_latents=normals, memory=memory, image_embedding=embedding,
                               dropped=dropped if dropped is not None else torch.zeros(B, dtype=torch.bool))

    def predict_noise(self, xt: torch.Tensor, t: torch.Tensor, bundle: ConditionBundle,
                      view_ids: tuple[int, ...]) -> torch.Tensor:
        """Noise prediction of the multi-view UNet.

        With ``head == "v"`` the UNet output is read as
        ``v = sqrt(abar) eps - sqrt(1 - abar) x0`` and converted exactly to
        ``eps = sqrt(abar) v + sqrt(1 - abar) xt``. The clean-image estimate
        then never divides by ``sqrt(abar)``, which keeps it stable at high
        noise levels; the training loss stays the noise MSE.
        """
        out = self.unet(xt, t, bundle, view_ids=view_ids)
        if self.config.head == "eps":
            return out
        if not isinstance(t, torch.Tensor):
            t = torch.full((xt.shape[0],), int(t), dtype=torch.long)
        ab = _SCHEDULE.alpha_bar_tensor(t.reshape(-1).expand(xt.shape[0]), dtype=torch.float64)
        ab = ab.reshape(-1, *([1] * (xt.ndim - 1)))
        return ab.sqrt().to(out.dtype) * out + (1.0 - ab).sqrt().to(xt.dtype) * xt

    def denoise_body(self, xt: torch.Tensor, t: torch.Tensor, cond: BodyCondition) -> torch.Tensor:
        return self.predict_noise(xt, t, self.body_bundle(t, cond), cond.view_ids)

    # -- stage 2 -------------------------------------------------------------
    def face_tokens(self, renders: torch.Tensor, id_image: torch.Tensor) -> torch.Tensor:
        f3d = self.face_encoder3d(renders)
        f2d = self.id_encoder(id_image)
        return self.fusion(f2d[:, None].expand(*f3d.shape[:2], -1), f3d)

    def face_bundle(self, cond: FaceCondition) -> ConditionBundle:
        B = cond.guide.shape[0]
        if cond.guide.shape != cond.renders.shape:
            raise ShapeError(f"guide {tuple(cond.guide.shape)} and renders {tuple(cond.renders.shape)} differ")
        return ConditionBundle(
            normal_latents=self.guide_encoder(cond.guide),
            face_tokens=self.face_tokens(cond.renders, cond.id_image),
            image_embedding=self.image_encoder(cond.id_image),
            dropped=cond.dropped if cond.dropped is not None else torch.zeros(B, dtype=torch.bool),
        )

    def denoise_face(self, xt: torch.Tensor, t: torch.Tensor, cond: FaceCondition) -> torch.Tensor:
        return self.predict_noise(xt, t, self.face_bundle(cond), cond.view_ids)

    # -- parameter groups ----------------------------------------------------
    def frozen_modules(self) -> dict[str, nn.Module]:
        return {"image_encoder": self.image_encoder, "id_encoder": self.id_encoder}

    def phase_parameters(self, phase: str) -> list[nn.Parameter]:
        """Trainable parameters of a phase: body trains the reference net, UNet and normal encoder;
        face trains the UNet, guide encoder and face embedding modules."""
        if phase == "body":
            mods = [self.single_net, self.unet, self.normal_encoder]
        elif phase == "face":
            mods = [self.unet, self.guide_encoder, self.face_encoder3d, self.fusion]
        else:
            raise ConfigError(f"unknown phase {phase!r}")
        return [p for m in mods for p in m.parameters()]


class BodyDenoiser:
    """``model(xt, t, BodyCondition)`` view of a :class:`HumanMV`."""

    def __init__(self, model: HumanMV):
        self.model = model

    def __call__(self, xt, t, cond: BodyCondition):
        return self.model.denoise_body(xt, t, cond)


class FaceDenoiser:
    def __init__(self, model: HumanMV):
        self.model = model

    def __call__(self, xt, t, cond: FaceCondition):
        return self.model.denoise_face(xt, t, cond)


def build_model(config: ModelConfig | None = None, seed: int = 0) -> HumanMV:
    """Construct with parameters initialized from ``seed`` (global torch RNG is restored afterwards)."""
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        return HumanMV(config)
    finally:
        torch.random.set_rng_state(state)


# -- checkpoints --------------------------------------------------------------
def checkpoint_bytes(model: HumanMV, meta: dict | None = None) -> bytes:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    metadata = {"format": FORMAT, "config": model.config.to_dict(), **(meta or {})}
    return container.dumps(tensors, metadata)


def save_checkpoint(path: str | Path, model: HumanMV, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, meta))
    return path


def load_checkpoint(path: str | Path) -> tuple[HumanMV, dict]:
    tensors, meta = container.load(path)
    if meta.get("format") != FORMAT:
        raise ValidationError(f"{path} is not a model checkpoint (format={meta.get('format')!r})")
    model = HumanMV(ModelConfig.from_dict(meta["config"]))
    state = model.state_dict()
    missing = set(state) - set(tensors)
    if missing:
        raise ValidationError(f"checkpoint lacks {sorted(missing)[:5]}")
    model.load_state_dict({k: torch.from_numpy(np.array(tensors[k])).to(state[k].dtype) for k in state})
    return model, meta


def describe(meta: dict) -> str:
    return json.dumps({k: v for k, v in meta.items() if k != "config"}, sort_keys=True)
