"""Confidence-weighted noise regression and its log-barrier regulariser."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from ..errors import ConfigError, ShapeError
from ..training import check_finite

CONF_LOG_MIN, CONF_LOG_MAX = -10.0, 10.0


@dataclass(frozen=True)
class UncertaintyConfig:
    beta: float = 1.0
    delta: float = 1e-6
    lam: float = 0.1

    def __post_init__(self):
        if self.beta <= 0 or self.delta <= 0 or self.lam < 0:
            raise ConfigError("need beta > 0, delta > 0 and lam >= 0")


def confidence_from_logits(pre: torch.Tensor) -> torch.Tensor:
    """Positive confidence via ``exp`` of a pre-activation clamped to [-10, 10]."""
    return torch.exp(pre.clamp(CONF_LOG_MIN, CONF_LOG_MAX))


def uncertainty_loss(
    eps_pred: torch.Tensor, confidence: torch.Tensor, eps: torch.Tensor, cfg: UncertaintyConfig = UncertaintyConfig()
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return ``(total, recon, reg)``.

    ``recon`` averages ``0.5 * (eps - eps_pred)^2 * conf^beta`` over every
    element, a single confidence channel being broadcast across the image
    channels, so unit confidence gives half the mean squared error.
    ``reg`` averages ``-log(conf^beta + delta)`` over pixels.
    """
    if eps_pred.shape != eps.shape:
        raise ShapeError(f"eps_pred {tuple(eps_pred.shape)} vs eps {tuple(eps.shape)}")
    if confidence.dim() != eps.dim() or confidence.shape[1] != 1 or confidence.shape[2:] != eps.shape[2:]:
        raise ShapeError(f"confidence must be B x 1 x H x W, got {tuple(confidence.shape)}")
    w = confidence**cfg.beta
    recon = (0.5 * (eps - eps_pred) ** 2 * w).mean()
    reg = (-torch.log(w + cfg.delta)).mean()
    total = recon + cfg.lam * reg
    check_finite(total, "uncertainty loss")
    return total, recon, reg


def optimal_confidence(residual_sq: float, cfg: UncertaintyConfig = UncertaintyConfig(), max_value: float = math.exp(CONF_LOG_MAX)) -> float:
    """Minimiser of ``0.5 r^2 w - lam log w`` over ``w = conf^beta``, i.e. ``2 lam / r^2``.

    ``residual_sq`` is the squared residual averaged over image channels. A
    zero residual has no finite optimum and returns ``max_value``.
    """
    if residual_sq < 0:
        raise ConfigError("residual_sq must be non-negative")
    if cfg.lam <= 0:
        raise ConfigError("the closed form needs lam > 0")
    if residual_sq == 0:
        return max_value
    return min(2.0 * cfg.lam / residual_sq, max_value)


def fit_confidence(
    residual_sq: torch.Tensor, cfg: UncertaintyConfig = UncertaintyConfig(), steps: int = 2000, lr: float = 0.05
) -> torch.Tensor:
    """Fit a free per-pixel confidence map to frozen squared residuals.

    ``residual_sq`` is ``B x 1 x H x W`` (already averaged over channels). The
    map is parameterised through the same clamped exponential as the
    denoiser head and optimised with the full uncertainty objective.
    """
    r = residual_sq.detach()
    pre = torch.zeros_like(r, requires_grad=True)
    opt = torch.optim.Adam([pre], lr=lr)
    zeros = torch.zeros_like(r)
    for _ in range(steps):
        conf = confidence_from_logits(pre)
        total, _, _ = uncertainty_loss(zeros, conf, r.sqrt(), cfg)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
    return confidence_from_logits(pre.detach())
