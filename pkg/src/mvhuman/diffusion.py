"""Noise schedule, forward process, epsilon objective and the DDIM sampler.

Everything random takes an explicit ``torch.Generator``; nothing here touches
global RNG state. Models are plain callables ``model(xt, t, cond) -> eps``
where ``t`` is a ``(B,)`` long tensor of timesteps in ``[1, T]``.

Conditions used with classifier-free guidance expose ``as_null()`` returning
the unconditional counterpart.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, NumericError, ShapeError

Denoiser = Callable[[torch.Tensor, torch.Tensor, Any], torch.Tensor]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step diffusion coefficients, stored in float64.

    Arrays are indexed ``[t - 1]`` for timestep ``t`` in ``[1, T]``; use
    :meth:`alpha_bar` for the 1-based lookup with ``alpha_bar(0) == 1``.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variance: np.ndarray

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ConfigError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t - 1])

    def alpha_bar_tensor(self, t: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
        table = torch.from_numpy(np.concatenate([[1.0], self.alpha_bars]))
        return table[t.long().cpu()].to(dtype=dtype, device=t.device)


def schedule_from_betas(betas: Sequence[float]) -> NoiseSchedule:
    b = np.asarray(betas, dtype=np.float64)
    if b.ndim != 1 or b.size < 1:
        raise ConfigError("betas must be a non-empty 1-D sequence")
    if not np.all((b > 0) & (b < 1)):
        raise ConfigError("every beta must lie in (0, 1)")
    alphas = 1.0 - b
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior = b * (1.0 - prev) / (1.0 - alpha_bars)
    for arr in (b, alphas, alpha_bars, posterior):
        arr.setflags(write=False)
    return NoiseSchedule(T=int(b.size), betas=b, alphas=alphas, alpha_bars=alpha_bars, posterior_variance=posterior)


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        return schedule_from_betas([beta_start])
    return schedule_from_betas(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def _expand(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return coef.reshape(coef.shape + (1,) * (like.ndim - coef.ndim))


def forward_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form q(x_t | x_0): ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` is either an int shared by the whole tensor or a ``(B,)`` tensor
    indexing the leading axis.
    """
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.min() < 1 or t.max() > schedule.T:
            raise ConfigError(f"timesteps must lie in [1, {schedule.T}]")
        ab = _expand(schedule.alpha_bar_tensor(t, dtype=torch.float64), x0)
        return (ab.sqrt().to(x0.dtype) * x0) + ((1.0 - ab).sqrt().to(x0.dtype) * eps)
    t = int(t)
    if not 1 <= t <= schedule.T:
        raise ConfigError(f"timestep {t} outside [1, {schedule.T}]")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def ddpm_loss(model: Denoiser, x0: torch.Tensor, cond: Any, schedule: NoiseSchedule,
              rng: torch.Generator) -> torch.Tensor:
    """Epsilon-prediction MSE with one uniformly drawn timestep per batch item.

    Draw order is fixed (timesteps first, then noise) so a seeded generator
    can be replayed by an independent implementation.
    """
    B = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    xt = forward_sample(x0, t, eps, schedule)
    pred = model(xt, t, cond)
    if pred.shape != eps.shape:
        raise ShapeError(f"model returned {tuple(pred.shape)}, expected {tuple(eps.shape)}")
    if not torch.isfinite(pred).all():
        raise NumericError(f"non-finite denoiser output at timesteps {t.tolist()}")
    return torch.mean((eps - pred) ** 2)


def cfg_predict(model: Denoiser, xt: torch.Tensor, t: torch.Tensor, cond: Any, null_cond: Any,
                scale: float) -> torch.Tensor:
    if scale < 0:
        raise ConfigError(f"guidance scale must be >= 0, got {scale}")
    eps_cond = model(xt, t, cond)
    eps_null = model(xt, t, null_cond)
    return eps_null + scale * (eps_cond - eps_null)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Descending, evenly spaced sub-sequence ``floor(T * i / steps)`` for i = steps..1."""
    if not 1 <= steps <= T:
        raise ConfigError(f"steps must lie in [1, {T}], got {steps}")
    return [(T * i) // steps for i in range(steps, 0, -1)]


def ddim_sample(model: Denoiser, xT, cond: Any, schedule: NoiseSchedule, steps: int = 50,
                eta: float = 0.0, cfg_scale: float = 1.0, rng: torch.Generator | None = None,
                clip: float | None = None):
    """Run the DDIM recurrence from ``xT`` down to a clean estimate.

    ``xT`` may be a tensor or any object with a ``views`` tensor attribute
    (e.g. ``ViewBatch``); the return value has the same type. With
    ``cfg_scale != 1`` the model is evaluated twice per step, against
    ``cond`` and ``cond.as_null()``.
    """
    if eta < 0:
        raise ConfigError(f"eta must be >= 0, got {eta}")
    if eta > 0 and rng is None:
        raise ConfigError("stochastic DDIM (eta > 0) needs an explicit generator")
    wrapped = not isinstance(xT, torch.Tensor)
    x = xT.views if wrapped else xT
    ts = ddim_timesteps(schedule.T, steps)
    null_cond = cond.as_null() if cfg_scale != 1.0 else None
    B = x.shape[0]
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        tt = torch.full((B,), t, dtype=torch.long)
        with torch.no_grad():
            if null_cond is None:
                eps = model(x, tt, cond)
            else:
                eps = cfg_predict(model, x, tt, cond, null_cond, cfg_scale)
        if not torch.isfinite(eps).all():
            raise NumericError(f"non-finite noise prediction at DDIM timestep {t}")
        ab, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
        x0_hat = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        if clip is not None:
            x0_hat = x0_hat.clamp(-clip, clip)
            eps = (x - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)
        sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
        x = math.sqrt(ab_prev) * x0_hat + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * torch.randn(x.shape, generator=rng, dtype=x.dtype)
    if wrapped:
        return dataclasses.replace(xT, views=x)
    return x
