"""
Confidence-weighted noise regression
====================================

The per-pixel optimum of the uncertainty objective is 2*lam/r^2. Fit a free
confidence map to frozen residuals and compare with that closed form.
"""

import torch

from sar2opt.diffusion import UncertaintyConfig, fit_confidence, optimal_confidence, uncertainty_loss

cfg = UncertaintyConfig(beta=1.0, delta=1e-6, lam=0.1)
gen = torch.Generator().manual_seed(0)

# unit confidence reduces the objective to half the mean squared error
eps, pred = torch.randn(2, 3, 8, 8, generator=gen), torch.randn(2, 3, 8, 8, generator=gen)
total, recon, reg = uncertainty_loss(pred, torch.ones(2, 1, 8, 8), eps, cfg)
print(f"recon {recon:.6f} vs half MSE {0.5 * torch.mean((pred - eps) ** 2):.6f}, reg {reg:.2e}")

residual_sq = torch.rand(1, 1, 16, 16, generator=gen) * 2 + 0.05
fitted = fit_confidence(residual_sq, cfg, steps=1500)
oracle = 2 * cfg.lam / residual_sq
rel = ((fitted - oracle).abs() / oracle).median()
print(f"median relative error of fitted confidence: {rel:.4f}")
print("r^2 = 2*lam gives", optimal_confidence(2 * cfg.lam, cfg))
