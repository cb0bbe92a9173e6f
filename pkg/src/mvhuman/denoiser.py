"""Multi-view denoising UNet.

Views are processed as a ``(B, V, C, H, W)`` tensor. Convolutions run on the
flattened ``B * V`` axis; transformer blocks at the attention levels carry

* spatial self-attention, optionally with reference tokens from a
  :class:`~mvhuman.transfer.MemoryBox` concatenated onto keys/values,
* cross-view attention over the tokens of all views of a sample,
* cross-attention onto fused face tokens,
* a feed-forward layer.

Normal-map latents enter by channel concatenation before the first
convolution. View identity is a learned embedding added to the timestep
embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .transfer import MemoryBox, read_expand


@dataclass
class DenoiserConfig:
    in_channels: int = 3
    cond_channels: int = 4
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 2)
    attention_levels: tuple[int, ...] = (2,)
    heads: int = 4
    token_width: int = 32
    num_views: int = 6
    image_embed_dim: int = 32
    groups: int = 8
    enable_face: bool = True
    cross_view: bool = True

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.attention_levels = tuple(self.attention_levels)
        if not self.attention_levels:
            raise ConfigError("at least one attention level is required")
        if any(not 0 <= lvl < len(self.channel_mult) for lvl in self.attention_levels):
            raise ConfigError(f"attention levels {self.attention_levels} outside {len(self.channel_mult)} levels")
        if self.num_views < 1:
            raise ConfigError("num_views must be >= 1")
        for w in self.channel_widths():
            if w % self.heads or w % min(self.groups, w):
                raise ConfigError(f"width {w} not divisible by heads={self.heads} / groups={self.groups}")

    def channel_widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mult)

    def to_dict(self) -> dict:
        return asdict(self)

    def single_view(self) -> "DenoiserConfig":
        """Config of the paired single-view network (same widths, no conditioning)."""
        d = self.to_dict()
        d.update(cond_channels=0, num_views=1, enable_face=False)
        return DenoiserConfig(**d)


@dataclass(eq=False)
class ViewBatch:
    """``views`` is ``(B, V, C, H, W)``; ``poses`` and ``view_ids`` have length V."""

    views: torch.Tensor
    poses: tuple = ()
    view_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.views.ndim != 5:
            raise ShapeError(f"views must be (B, V, C, H, W), got {tuple(self.views.shape)}")
        V = self.views.shape[1]
        if self.view_ids and len(self.view_ids) != V:
            raise ShapeError(f"{len(self.view_ids)} view ids for {V} views")
        if len(set(self.view_ids)) != len(self.view_ids):
            raise ShapeError("duplicate view ids")
        if self.poses and len(self.poses) != V:
            raise ShapeError(f"{len(self.poses)} poses for {V} views")


@dataclass(eq=False)
class ConditionBundle:
    """Everything the denoiser is conditioned on.

    normal_latents: ``(B, V, Cn, H, W)`` encoded normal maps (or guide crops).
    memory: reference features from the single-view network.
    face_tokens: ``(B, V, n, token_width)`` fused face tokens.
    image_embedding: ``(B, E)`` global embedding; ``None`` selects the learned
        null embedding.
    dropped: ``(B,)`` bool; True marks samples whose condition is replaced
        by the null condition (zero normals and face tokens, no memory, null
        image embedding).
    """

    normal_latents: torch.Tensor | None = None
    memory: MemoryBox | None = None
    face_tokens: torch.Tensor | None = None
    image_embedding: torch.Tensor | None = None
    dropped: torch.Tensor | None = None


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int,
           key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Multi-head softmax attention on ``(B, N, D)`` tensors.

    ``key_mask`` is ``(B, M)`` bool, False entries are excluded.
    """
    B, N, D = q.shape
    M = k.shape[1]
    dh = D // heads
    q = q.reshape(B, N, heads, dh).transpose(1, 2)
    k = k.reshape(B, M, heads, dh).transpose(1, 2)
    v = v.reshape(B, M, heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    w = torch.softmax(scores, dim=-1)
    return (w @ v).transpose(1, 2).reshape(B, N, D)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        kv_dim = kv_dim or dim
        self.heads = heads
        self.dim = dim
        self.kv_dim = kv_dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(kv_dim, dim, bias=False)
        self.to_v = nn.Linear(kv_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None, key_mask=None):
        context = x if context is None else context
        if x.shape[-1] != self.dim or context.shape[-1] != self.kv_dim:
            raise ShapeError(f"attention widths ({x.shape[-1]}, {context.shape[-1]}) != ({self.dim}, {self.kv_dim})")
        out = attend(self.to_q(x), self.to_k(context), self.to_v(context), self.heads, key_mask)
        return self.to_out(out)


def cross_view_attention(hidden: torch.Tensor, attn: Attention) -> torch.Tensor:
    """Each view's tokens attend over all V views' tokens with shared weights.

    ``hidden`` is ``(B, V, N, D)``; returns the attention output, same shape.
    """
    B, V, N, D = hidden.shape
    flat = hidden.reshape(B, V * N, D)
    return attn(flat).reshape(B, V, N, D)


def inject_reference(hidden: torch.Tensor, ref: torch.Tensor | None, attn: Attention,
                     ref_keep: torch.Tensor | None = None) -> torch.Tensor:
    """Self-attention with keys/values ``[hidden || ref]`` along the token axis.

    ``hidden`` is ``(B, N, D)`` and ``ref`` ``(B, M, D)``. ``ref_keep`` is an
    optional ``(B,)`` bool selecting which samples see their reference.
    Without a reference (or with ``M == 0``) this is plain self-attention.
    """
    if ref is None or ref.shape[1] == 0:
        return attn(hidden)
    if ref.shape[-1] != hidden.shape[-1]:
        raise ShapeError(f"reference width {ref.shape[-1]} != hidden width {hidden.shape[-1]}")
    if ref.shape[0] != hidden.shape[0]:
        raise ShapeError("reference must already be expanded across views")
    kv = torch.cat([hidden, ref], dim=1)
    mask = None
    if ref_keep is not None and not bool(ref_keep.all()):
        B, N, M = hidden.shape[0], hidden.shape[1], ref.shape[1]
        mask = torch.ones(B, N + M, dtype=torch.bool)
        mask[:, N:] = ref_keep[:, None]
    return attn(hidden, kv, key_mask=mask)


def inject_face_tokens(hidden: torch.Tensor, face_tokens: torch.Tensor | None, attn: Attention,
                       norm: nn.Module | None = None) -> torch.Tensor:
    """Residual cross-attention ``hidden + attn(norm(hidden), face_tokens)``; identity when absent."""
    if face_tokens is None:
        return hidden
    if face_tokens.shape[-1] != attn.kv_dim:
        raise ShapeError(f"face token width {face_tokens.shape[-1]} != cross-attention width {attn.kv_dim}")
    q = hidden if norm is None else norm(hidden)
    return hidden + attn(q, face_tokens)


def condition_normals(view_latents: torch.Tensor, normal_latents: torch.Tensor | None) -> torch.Tensor:
    """Channel-concatenate encoded normals onto each view: ``(..., C, H, W) -> (..., C + Cn, H, W)``."""
    if normal_latents is None:
        return view_latents
    if view_latents.shape[-2:] != normal_latents.shape[-2:] or view_latents.shape[:-3] != normal_latents.shape[:-3]:
        raise ShapeError(f"normal latents {tuple(normal_latents.shape)} do not match views {tuple(view_latents.shape)}")
    return torch.cat([view_latents, normal_latents], dim=-3)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int | None, groups: int = 8, zero_init: bool = False):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout) if emb_dim else None
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        if zero_init:
            nn.init.zeros_(self.conv2.weight)
            nn.init.zeros_(self.conv2.bias)

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb is not None:
            h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class ViewTransformer(nn.Module):
    def __init__(self, dim: int, cfg: DenoiserConfig, block_id: str):
        super().__init__()
        self.block_id = block_id
        self.cross_view = cfg.cross_view
        self.norm_in = nn.GroupNorm(min(cfg.groups, dim), dim)
        self.proj_in = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.attn_self = Attention(dim, cfg.heads)
        if cfg.cross_view:
            self.norm2 = nn.LayerNorm(dim)
            self.attn_view = Attention(dim, cfg.heads)
        self.attn_face = None
        if cfg.enable_face:
            self.norm3 = nn.LayerNorm(dim)
            self.attn_face = Attention(dim, cfg.heads, kv_dim=cfg.token_width)
        self.norm4 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.proj_out = nn.Linear(dim, dim)

    def forward(self, h, V, ref=None, ref_keep=None, face_tokens=None, collect=None):
        BV, C, H, W = h.shape
        x = self.proj_in(self.norm_in(h).flatten(2).transpose(1, 2))
        n = self.norm1(x)
        if collect is not None:
            collect[self.block_id] = n
        x = x + inject_reference(n, ref, self.attn_self, ref_keep)
        if self.cross_view:
            x = x + cross_view_attention(self.norm2(x).reshape(BV // V, V, H * W, C), self.attn_view).reshape(BV, H * W, C)
        if self.attn_face is not None:
            x = inject_face_tokens(x, face_tokens, self.attn_face, norm=self.norm3)
        x = x + self.ff(self.norm4(x))
        return h + self.proj_out(x).transpose(1, 2).reshape(BV, C, H, W)


class MultiViewUNet(nn.Module):
    """Encoder-decoder noise predictor over a batch of view sets."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.config = cfg
        widths = cfg.channel_widths()
        emb_dim = 4 * cfg.base_channels
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(cfg.base_channels, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.view_embed = nn.Embedding(cfg.num_views, emb_dim)
        self.image_proj = nn.Linear(cfg.image_embed_dim, emb_dim)
        self.null_image_embedding = nn.Parameter(torch.zeros(cfg.image_embed_dim))
        self.conv_in = nn.Conv2d(cfg.in_channels + cfg.cond_channels, widths[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downsample = nn.ModuleList()
        prev = widths[0]
        for lvl, w in enumerate(widths):
            self.down_res.append(ResBlock(prev, w, emb_dim, cfg.groups))
            if lvl in cfg.attention_levels:
                self.down_attn[str(lvl)] = ViewTransformer(w, cfg, f"down{lvl}")
            if lvl < len(widths) - 1:
                self.downsample.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            prev = w

        self.mid_res1 = ResBlock(prev, prev, emb_dim, cfg.groups)
        self.mid_attn = ViewTransformer(prev, cfg, "mid")
        self.mid_res2 = ResBlock(prev, prev, emb_dim, cfg.groups)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        self.upsample = nn.ModuleList()
        for lvl in reversed(range(len(widths))):
            w = widths[lvl]
            self.up_res.append(ResBlock(prev + w, w, emb_dim, cfg.groups))
            if lvl in cfg.attention_levels:
                self.up_attn[str(lvl)] = ViewTransformer(w, cfg, f"up{lvl}")
            if lvl > 0:
                self.upsample.append(nn.Conv2d(w, w, 3, padding=1))
            prev = w

        self.norm_out = nn.GroupNorm(min(cfg.groups, widths[0]), widths[0])
        self.conv_out = nn.Conv2d(widths[0], cfg.in_channels, 3, padding=1)

    @property
    def memory_block_ids(self) -> tuple[str, ...]:
        lv = sorted(self.config.attention_levels, reverse=True)
        return ("mid",) + tuple(f"up{l}" for l in lv)

    def _embedding(self, t, view_ids, image_embedding, dropped, B, V, dtype):
        emb = self.time_mlp(timestep_embedding(t, self.config.base_channels).to(dtype))
        null = self.null_image_embedding.to(dtype)[None].expand(B, -1)
        if image_embedding is None:
            img = null
        elif dropped is not None:
            img = torch.where(dropped[:, None], null, image_embedding.to(dtype))
        else:
            img = image_embedding.to(dtype)
        emb = emb + self.image_proj(img)
        view_emb = self.view_embed(view_ids)
        return (emb[:, None] + view_emb[None]).reshape(B * V, -1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: ConditionBundle | None = None,
                view_ids=None, collect: dict | None = None) -> torch.Tensor:
        """Predict noise for ``x`` of shape ``(B, V, C, H, W)``.

        ``collect`` (a dict) receives the hidden states entering the
        self-attention of the middle and up blocks, keyed by block id.
        """
        cfg = self.config
        cond = cond or ConditionBundle()
        if x.ndim != 5:
            raise ShapeError(f"expected (B, V, C, H, W), got {tuple(x.shape)}")
        B, V, C, H, W = x.shape
        if V > cfg.num_views:
            raise ShapeError(f"{V} views exceed the configured {cfg.num_views}")
        if view_ids is None:
            view_ids = torch.arange(V)
        view_ids = torch.as_tensor(view_ids, dtype=torch.long)
        if view_ids.shape != (V,):
            raise ShapeError(f"need {V} view ids, got {tuple(view_ids.shape)}")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(B)
        dropped = cond.dropped
        if dropped is not None and not bool(dropped.any()):
            dropped = None
        all_dropped = dropped is not None and bool(dropped.all())

        normals = cond.normal_latents
        if cfg.cond_channels:
            if normals is None:
                normals = x.new_zeros(B, V, cfg.cond_channels, H, W)
            elif normals.shape != (B, V, cfg.cond_channels, H, W):
                raise ShapeError(f"normal latents {tuple(normals.shape)} != {(B, V, cfg.cond_channels, H, W)}")
            elif dropped is not None:
                normals = normals * (~dropped).to(normals.dtype)[:, None, None, None, None]
        elif normals is not None:
            raise ShapeError("this network takes no normal conditioning")

        face = cond.face_tokens
        if face is not None:
            if not cfg.enable_face:
                raise ShapeError("face tokens given to a network built without face attention")
            if face.ndim == 3:
                face = face[:, None].expand(B, V, *face.shape[1:])
            if face.shape[:2] != (B, V) or face.shape[-1] != cfg.token_width:
                raise ShapeError(f"face tokens {tuple(face.shape)} incompatible with B={B}, V={V}, width={cfg.token_width}")
            if dropped is not None:
                face = face * (~dropped).to(face.dtype)[:, None, None, None]
            face = face.reshape(B * V, *face.shape[2:])

        memory = None if all_dropped else cond.memory
        ref_keep = None
        if memory is not None and dropped is not None:
            ref_keep = (~dropped)[:, None].expand(B, V).reshape(-1)

        def ref_for(block_id):
            if memory is None:
                return None
            r = read_expand(memory, block_id, V)
            return r.reshape(B * V, *r.shape[-2:])

        emb = self._embedding(t, view_ids, cond.image_embedding, dropped, B, V, x.dtype)
        h = condition_normals(x, normals).reshape(B * V, -1, H, W)
        h = self.conv_in(h)
        skips = []
        for lvl, res in enumerate(self.down_res):
            h = res(h, emb)
            if str(lvl) in self.down_attn:
                h = self.down_attn[str(lvl)](h, V, face_tokens=face)
            skips.append(h)
            if lvl < len(self.downsample):
                h = self.downsample[lvl](h)

        h = self.mid_res1(h, emb)
        h = self.mid_attn(h, V, ref=ref_for("mid"), ref_keep=ref_keep, face_tokens=face, collect=collect)
        h = self.mid_res2(h, emb)

        n_levels = len(self.down_res)
        for i, res in enumerate(self.up_res):
            lvl = n_levels - 1 - i
            h = res(torch.cat([h, skips.pop()], dim=1), emb)
            if str(lvl) in self.up_attn:
                h = self.up_attn[str(lvl)](h, V, ref=ref_for(f"up{lvl}"), ref_keep=ref_keep,
                                           face_tokens=face, collect=collect)
            if lvl > 0:
                h = self.upsample[i](F.interpolate(h, scale_factor=2.0, mode="nearest"))

        out = self.conv_out(F.silu(self.norm_out(h)))
        return out.reshape(B, V, C, H, W)


def denoise(net: MultiViewUNet, batch: ViewBatch, t, cond: ConditionBundle | None = None) -> torch.Tensor:
    """Noise prediction for every view of ``batch`` at timestep ``t``."""
    cond = cond or ConditionBundle()
    V = batch.views.shape[1]
    if cond.normal_latents is not None and cond.normal_latents.shape[1] != V:
        raise ShapeError(f"{cond.normal_latents.shape[1]} normal latents for {V} views")
    view_ids = batch.view_ids or tuple(range(V))
    B = batch.views.shape[0]
    if not isinstance(t, torch.Tensor):
        t = torch.full((B,), int(t), dtype=torch.long)
    return net(batch.views, t, cond, view_ids=view_ids)


class ConvEncoder(nn.Module):
    """Two-layer conv encoder mapping images to same-resolution latents (normal maps, guide crops)."""

    def __init__(self, cin: int = 3, cout: int = 4, hidden: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, cout, 3, padding=1)

    def forward(self, x):
        lead = x.shape[:-3]
        h = self.conv2(F.silu(self.conv1(x.reshape(-1, *x.shape[-3:]))))
        return h.reshape(*lead, *h.shape[-3:])


class ImageEncoder(nn.Module):
    """Frozen random conv features pooled into a global image embedding."""

    def __init__(self, cin: int = 3, dim: int = 32, hidden: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, hidden, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.proj = nn.Linear(2 * hidden, dim)
        self.requires_grad_(False)

    def forward(self, x):
        return self.proj(self.net(x).mean(dim=(-2, -1)))
