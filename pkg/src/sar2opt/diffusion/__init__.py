"""Conditional pixel-space diffusion with a guided control branch and a
per-pixel confidence head."""

from .denoiser import Condition, Denoiser, DenoiserConfig, DenoiserOutput, UNet, timestep_embedding
from .schedule import NoiseSchedule, cfg_combine, ddim_step, ddim_timesteps, forward_diffuse, linear_schedule, predict_x0
from .translator import (
    TranslationResult,
    TranslatorConfig,
    load_translator,
    sample,
    save_translator,
    student_conditions,
    train_translator,
    translate,
)
from .uncertainty import UncertaintyConfig, confidence_from_logits, fit_confidence, optimal_confidence, uncertainty_loss

__all__ = [
    "Condition",
    "Denoiser",
    "DenoiserConfig",
    "DenoiserOutput",
    "NoiseSchedule",
    "TranslationResult",
    "TranslatorConfig",
    "UNet",
    "UncertaintyConfig",
    "cfg_combine",
    "confidence_from_logits",
    "ddim_step",
    "ddim_timesteps",
    "fit_confidence",
    "forward_diffuse",
    "linear_schedule",
    "load_translator",
    "optimal_confidence",
    "predict_x0",
    "sample",
    "save_translator",
    "student_conditions",
    "timestep_embedding",
    "train_translator",
    "translate",
    "uncertainty_loss",
]
