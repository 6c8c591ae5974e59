"""Student objective: class-balanced BCE, soft-logit distillation,
attention/CLS alignment and VICReg regularisation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..backbone import FeatureBundle
from ..errors import ConfigError, ShapeError, ValidationError

log = logging.getLogger(__name__)

ATTN_EPS = 1e-8


@dataclass
class DistillWeights:
    lambda_kd: float = 1.0
    lambda_attn: float = 1.0
    temperature: float = 4.0
    alpha_min: float = 1.0
    alpha_max: float = 100.0
    lambda_inv: float = 25.0
    mu_var: float = 25.0
    nu_cov: float = 1.0
    class_counts: list[int] = field(default_factory=list)
    total: int = 0

    def __post_init__(self):
        for name in ("lambda_kd", "lambda_attn", "alpha_min", "alpha_max", "lambda_inv", "mu_var", "nu_cov"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.alpha_min > self.alpha_max:
            raise ConfigError("alpha_min must not exceed alpha_max")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")

    def positive_weights(self) -> torch.Tensor:
        return torch.tensor([class_weight(c, self) for c in range(len(self.class_counts))], dtype=torch.float64)


def class_weight(c: int, weights: DistillWeights) -> float:
    """Positive-class weight ``clip((N - N_c) / N_c, alpha_min, alpha_max)``."""
    n_c = weights.class_counts[c]
    n = weights.total
    if n_c <= 0:
        log.warning("class %d has no positive samples; using alpha_max", c)
        return float(weights.alpha_max)
    if n_c > n:
        raise ValidationError(f"class count {n_c} exceeds sample count {n}")
    return float(np.clip((n - n_c) / n_c, weights.alpha_min, weights.alpha_max))


def _check_binary(labels: torch.Tensor) -> None:
    if not torch.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be binary")


def task_loss(logits: torch.Tensor, labels: torch.Tensor, pos_weight: torch.Tensor | DistillWeights) -> torch.Tensor:
    """Weighted BCE with the weight on the positive term only; batch-averaged."""
    _check_binary(labels)
    if isinstance(pos_weight, DistillWeights):
        pos_weight = pos_weight.positive_weights()
    w = pos_weight.to(logits.dtype)
    per_class = w * labels * F.logsigmoid(logits) + (1 - labels) * F.logsigmoid(-logits)
    return -per_class.mean(dim=-1).mean()


def logit_loss(z_s: torch.Tensor, z_t: torch.Tensor, temperature: float = 4.0) -> torch.Tensor:
    """Binary soft-target cross-entropy at temperature ``T``; teacher detached."""
    if z_s.shape != z_t.shape:
        raise ShapeError(f"student/teacher logits differ in shape: {tuple(z_s.shape)} vs {tuple(z_t.shape)}")
    p_t = torch.sigmoid(z_t.detach() / temperature)
    zs = z_s / temperature
    per_class = p_t * F.logsigmoid(zs) + (1 - p_t) * F.logsigmoid(-zs)
    return -per_class.mean(dim=-1).mean()


def _maps(x) -> Mapping[int, torch.Tensor]:
    return x.attn_per_layer if isinstance(x, FeatureBundle) else x


def _cls(x) -> Mapping[int, torch.Tensor]:
    return x.cls_per_layer if isinstance(x, FeatureBundle) else x


def attention_kl(a_s: torch.Tensor, a_t: torch.Tensor) -> torch.Tensor:
    """Per-sample ``KL(a_t || a_s)`` over the last axis, with an epsilon floor."""
    a_t = a_t.detach()
    return (a_t * (torch.log(a_t.clamp_min(ATTN_EPS)) - torch.log(a_s.clamp_min(ATTN_EPS)))).sum(dim=-1)


def attn_loss(bundle_s, bundle_t, layers: Sequence[int], tol: float = 1e-4) -> torch.Tensor:
    """Mean over layers (and batch) of the teacher-to-student attention KL."""
    maps_s, maps_t = _maps(bundle_s), _maps(bundle_t)
    terms = []
    for l in layers:
        a_s, a_t = maps_s[l], maps_t[l]
        for a in (a_s, a_t):
            if torch.any(a < 0) or torch.any((a.sum(dim=-1) - 1).abs() > tol):
                raise ValidationError(f"attention rows at layer {l} are not normalised")
        terms.append(attention_kl(a_s, a_t).mean())
    return torch.stack(terms).mean()


def cls_loss(bundle_s, bundle_t, layers: Sequence[int]) -> torch.Tensor:
    """Mean over layers of the squared L2 distance between [CLS] tokens."""
    cls_s, cls_t = _cls(bundle_s), _cls(bundle_t)
    terms = []
    for l in layers:
        if cls_s[l].shape != cls_t[l].shape:
            raise ShapeError(f"[CLS] shapes differ at layer {l}: {tuple(cls_s[l].shape)} vs {tuple(cls_t[l].shape)}")
        terms.append(((cls_s[l] - cls_t[l].detach()) ** 2).sum(dim=-1).mean())
    return torch.stack(terms).mean()


def _off_diagonal(m: torch.Tensor) -> torch.Tensor:
    n = m.shape[0]
    return m.flatten()[:-1].view(n - 1, n + 1)[:, 1:].flatten()


def vicreg_terms(z_s: torch.Tensor, z_t: torch.Tensor, gamma: float = 1.0, eps: float = 1e-4) -> dict[str, torch.Tensor]:
    """Unweighted invariance, variance and covariance terms.

    Variance is the hinge ``relu(gamma - std)`` averaged over dimensions and
    over the two branches; covariance is the summed squared off-diagonal
    covariance divided by ``d``, summed over branches.
    """
    if z_s.ndim != 2 or z_s.shape != z_t.shape:
        raise ShapeError("VICReg inputs must both be batch x d with equal shapes")
    n, d = z_s.shape
    if n < 2:
        raise ValidationError("VICReg needs a batch of at least 2")
    z_t = z_t.detach()
    inv = F.mse_loss(z_s, z_t)
    var, cov = [], []
    for z in (z_s, z_t):
        zc = z - z.mean(dim=0)
        std = torch.sqrt(zc.var(dim=0) + eps)
        var.append(F.relu(gamma - std).mean())
        c = zc.T @ zc / (n - 1)
        cov.append(_off_diagonal(c).pow(2).sum() / d)
    return {"inv": inv, "var": (var[0] + var[1]) / 2, "cov": cov[0] + cov[1]}


def vicreg_loss(z_s: torch.Tensor, z_t: torch.Tensor, weights: DistillWeights) -> torch.Tensor:
    t = vicreg_terms(z_s, z_t)
    return weights.lambda_inv * t["inv"] + weights.mu_var * t["var"] + weights.nu_cov * t["cov"]


def total_student_loss(
    bundle_s: FeatureBundle,
    bundle_t: FeatureBundle,
    labels: torch.Tensor,
    weights: DistillWeights,
    layers: Sequence[int],
    pos_weight: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Full student objective and its per-term breakdown."""
    pw = weights.positive_weights() if pos_weight is None else pos_weight
    terms = {
        "task": task_loss(bundle_s.logits, labels, pw),
        "logit": logit_loss(bundle_s.logits, bundle_t.logits, weights.temperature),
        "attn": attn_loss(bundle_s, bundle_t, layers),
        "cls": cls_loss(bundle_s, bundle_t, layers),
    }
    vic = vicreg_terms(bundle_s.final_cls, bundle_t.final_cls)
    terms["vicreg"] = weights.lambda_inv * vic["inv"] + weights.mu_var * vic["var"] + weights.nu_cov * vic["cov"]
    total = (
        terms["task"]
        + weights.lambda_kd * terms["logit"]
        + weights.lambda_attn * (terms["attn"] + terms["cls"])
        + terms["vicreg"]
    )
    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    breakdown.update({f"vicreg_{k}": float(v.detach()) for k, v in vic.items()})
    breakdown["total"] = float(total.detach())
    return total, breakdown
