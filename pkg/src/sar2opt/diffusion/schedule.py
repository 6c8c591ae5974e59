"""Noise schedule, forward process, DDIM update and guidance mixing."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from ..errors import ConfigError, ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor
    alpha_bar: torch.Tensor

    @property
    def steps(self) -> int:
        return int(self.betas.numel())

    def alpha_bar_at(self, t: int | torch.Tensor) -> torch.Tensor:
        """Cumulative product at ``t``; ``t = -1`` denotes the clean endpoint (1.0)."""
        t = torch.as_tensor(t, dtype=torch.long)
        padded = torch.cat([torch.ones(1, dtype=self.alpha_bar.dtype), self.alpha_bar])
        return padded[t + 1]


def linear_schedule(steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if steps < 2:
        raise ConfigError(f"need at least two diffusion steps, got {steps}")
    if not 0 < beta_start < beta_end < 1:
        raise ConfigError("betas must satisfy 0 < beta_start < beta_end < 1")
    betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
    return NoiseSchedule(betas, torch.cumprod(1.0 - betas, dim=0))


def _check_t(t: torch.Tensor, schedule: NoiseSchedule, allow_clean: bool = False) -> None:
    lo = -1 if allow_clean else 0
    if torch.any(t < lo) or torch.any(t >= schedule.steps):
        raise ValidationError(f"timestep out of range [{lo}, {schedule.steps - 1}]")


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return v.to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))


def forward_diffuse(x0: torch.Tensor, t: int | torch.Tensor, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` with per-sample ``t``."""
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    _check_t(t, schedule)
    if t.numel() == 1:
        t = t.expand(x0.shape[0])
    ab = _bcast(schedule.alpha_bar[t], x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def ddim_timesteps(schedule: NoiseSchedule, num_steps: int = 50) -> list[int]:
    """Uniform stride from ``T - 1`` downwards, e.g. 999, 979, ... for 50 of 1000."""
    if not 1 <= num_steps <= schedule.steps:
        raise ConfigError(f"num_steps must be in [1, {schedule.steps}]")
    stride = schedule.steps // num_steps
    return [schedule.steps - 1 - i * stride for i in range(num_steps)]


def predict_x0(x_t: torch.Tensor, eps: torch.Tensor, ab: torch.Tensor) -> torch.Tensor:
    return (x_t - (1.0 - ab).sqrt() * eps) / ab.sqrt()


def ddim_step(
    x_t: torch.Tensor,
    eps: torch.Tensor,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
    clip: bool = True,
) -> torch.Tensor:
    """One DDIM update from ``t`` to ``t_prev`` (``-1`` is the clean endpoint).

    The predicted clean image is clamped to [-1, 1] and the noise estimate
    is recomputed from it before the reprojection.
    """
    if t_prev >= t:
        raise ValidationError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    _check_t(torch.tensor([t, t_prev]), schedule, allow_clean=True)
    if t < 0:
        raise ValidationError("t must be a valid noisy timestep")
    ab = schedule.alpha_bar_at(t).to(x_t.dtype)
    ab_prev = schedule.alpha_bar_at(t_prev).to(x_t.dtype)
    x0 = predict_x0(x_t, eps, ab)
    if clip:
        x0 = x0.clamp(-1.0, 1.0)
        eps = (x_t - ab.sqrt() * x0) / (1.0 - ab).sqrt()
    sigma = eta * ((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev)).clamp_min(0).sqrt()
    direction = (1.0 - ab_prev - sigma**2).clamp_min(0).sqrt() * eps
    out = ab_prev.sqrt() * x0 + direction
    if eta > 0:
        out = out + sigma * torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return out


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, s: float) -> torch.Tensor:
    """Classifier-free guidance: ``eps_uncond + s (eps_cond - eps_uncond)``."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValidationError("conditional and unconditional predictions differ in shape")
    if s == 1:
        return eps_cond
    if s == 0:
        return eps_uncond
    return eps_uncond + s * (eps_cond - eps_uncond)
