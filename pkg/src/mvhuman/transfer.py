"""Memory box: reference-network features handed to the multi-view UNet.

The single-view network is a :class:`~mvhuman.denoiser.MultiViewUNet` run
with one view. Its hidden states entering the self-attention layers of the
middle block and every attention-bearing up block are token-normalized and
stored; the multi-view UNet concatenates them onto its own keys and values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F

from .errors import ConfigError, LookupFailure

NORM_EPS = 1e-5


@dataclass(frozen=True, eq=False)
class MemoryBox:
    """Captured reference features, one ``(B, N, C)`` tensor per block id."""

    entries: Mapping[str, torch.Tensor]
    timestep: torch.Tensor | int
    normalized: bool = True
    block_ids: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "block_ids", tuple(self.entries))


def token_normalize(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Per-token layer norm over the channel axis, no affine parameters."""
    return F.layer_norm(x, (x.shape[-1],), eps=eps)


def capture(single_net, ref_latent: torch.Tensor, t, image_embedding: torch.Tensor | None = None) -> MemoryBox:
    """Run the single-view network on the clean reference and record its memory.

    ``ref_latent`` is ``(B, C, H, W)``; ``t`` an int or ``(B,)`` tensor matching
    the denoising timestep of the multi-view pass.
    """
    if single_net.config.cond_channels != 0:
        raise ConfigError("the single-view network must not take conditioning channels")
    B = ref_latent.shape[0]
    if not isinstance(t, torch.Tensor):
        t = torch.full((B,), int(t), dtype=torch.long)
    from .denoiser import ConditionBundle

    cond = ConditionBundle(image_embedding=image_embedding)
    collected: dict[str, torch.Tensor] = {}
    single_net(ref_latent[:, None], t, cond, view_ids=torch.zeros(1, dtype=torch.long), collect=collected)
    entries = {k: token_normalize(v) for k, v in collected.items()}
    return MemoryBox(entries=entries, timestep=t, normalized=True)


def read_expand(box: MemoryBox, block_id: str, V: int) -> torch.Tensor:
    """Stored tokens replicated over the view axis: ``(B, N, C) -> (B, V, N, C)``.

    With ``V == 1`` the stored tensor is returned unchanged.
    """
    if block_id not in box.entries:
        raise LookupFailure(f"memory box has no block {block_id!r}; present: {list(box.entries)}")
    tokens = box.entries[block_id]
    if V == 1:
        return tokens
    return tokens[:, None].expand(tokens.shape[0], V, *tokens.shape[1:])


def check_pairing(single_cfg, multi_cfg) -> None:
    """Raise unless the single-view net's capture widths match the multi-view net."""
    if single_cfg.channel_widths() != multi_cfg.channel_widths():
        raise ConfigError(
            f"single-view widths {single_cfg.channel_widths()} != multi-view widths {multi_cfg.channel_widths()}")
    if tuple(single_cfg.attention_levels) != tuple(multi_cfg.attention_levels):
        raise ConfigError("single-view and multi-view attention levels differ")
