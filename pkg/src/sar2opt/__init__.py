"""Desk-scale SAR-to-optical translation with cross-modal distillation,
semantic guidance and uncertainty-weighted diffusion."""

__version__ = "0.1.0"
