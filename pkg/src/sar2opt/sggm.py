"""Semantically grounded guidance: text cross-attention followed by
cross-attention onto hierarchical encoder features, at every U-Net stage."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ViTEncoder, encode
from .errors import ConfigError, ShapeError, ValidationError

STAGES: tuple[str, ...] = ("enc1", "enc2", "enc3", "enc4", "mid", "dec1", "dec2", "dec3", "dec4")
FULL_SCALE_HIER = (14, 17, 20, 23)


def stage_to_layer(stage: str, hier_layers: Sequence[int] = FULL_SCALE_HIER) -> int:
    """Encoder layer feeding a U-Net stage.

    Encoder stages walk the hierarchy shallow to deep, the middle block takes
    the deepest layer and decoder stages walk back from deep to shallow.
    """
    if len(hier_layers) != 4:
        raise ConfigError("hier_layers must hold four layers")
    layers = sorted(hier_layers)
    if stage == "mid":
        return layers[-1]
    m = re_stage(stage)
    kind, i = m
    return layers[i - 1] if kind == "enc" else layers[4 - i]


def re_stage(stage: str) -> tuple[str, int]:
    if len(stage) == 4 and stage[:3] in ("enc", "dec") and stage[3] in "1234":
        return stage[:3], int(stage[3])
    raise ConfigError(f"unknown U-Net stage {stage!r}")


@dataclass
class HierPrompts:
    """Patch-token grids ``B x N x d`` of the hierarchical layers."""

    features: dict[int, torch.Tensor]
    source: str = ""

    def layers(self) -> list[int]:
        return sorted(self.features)


def extract_hier_prompts(sar3: torch.Tensor, student: ViTEncoder, source: str = "") -> HierPrompts:
    """Eval-mode, gradient-free patch tokens of the student's ``hier_layers``."""
    if student.training:
        raise ValidationError("the student must be in eval mode")
    layers = student.cfg.hier_layers
    bundle = encode(sar3, student)
    missing = [l for l in layers if l not in bundle.patch_tokens_per_layer]
    if missing:
        raise ValidationError(f"encoder did not return layers {missing}")
    return HierPrompts({l: bundle.patch_tokens_per_layer[l] for l in layers}, source)


def resample_tokens(tokens: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resample a square ``B x N x d`` token grid to ``size``."""
    b, n, d = tokens.shape
    side = int(round(math.sqrt(n)))
    if side * side != n:
        raise ShapeError(f"{n} tokens do not form a square grid")
    grid = tokens.transpose(1, 2).reshape(b, d, side, side)
    if (side, side) != tuple(size):
        grid = F.interpolate(grid, size=size, mode="bilinear", align_corners=False)
    return grid.flatten(2).transpose(1, 2)


class CrossAttention(nn.Module):
    """``Z + softmax((Z W_Q)(Y W_K)^T / sqrt(d_k)) (Y W_V) W_O`` with zero ``W_O``."""

    def __init__(self, query_dim: int, context_dim: int, d_k: int):
        super().__init__()
        self.d_k = d_k
        self.to_q = nn.Linear(query_dim, d_k, bias=False)
        self.to_k = nn.Linear(context_dim, d_k, bias=False)
        self.to_v = nn.Linear(context_dim, d_k, bias=False)
        self.proj_out = nn.Linear(d_k, query_dim)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)

    def attention(self, z: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        q, k = self.to_q(z), self.to_k(context)
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.d_k), dim=-1)

    def forward(self, z: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.to_q.in_features or context.shape[-1] != self.to_k.in_features:
            raise ShapeError(
                f"query dim {z.shape[-1]} / context dim {context.shape[-1]} do not match "
                f"{self.to_q.in_features} / {self.to_k.in_features}"
            )
        return z + self.proj_out(self.attention(z, context) @ self.to_v(context))


class GuidanceBlock(nn.Module):
    def __init__(self, stage: str, channels: int, text_dim: int, visual_dim: int, d_k: int = 32):
        super().__init__()
        self.stage = stage
        self.text = CrossAttention(channels, text_dim, d_k)
        self.visual = CrossAttention(channels, visual_dim, d_k)


def _flatten(z: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
    return z.flatten(2).transpose(1, 2), tuple(z.shape[-2:])


def _unflatten(tokens: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    return tokens.transpose(1, 2).reshape(tokens.shape[0], -1, *hw)


def phase1_text_attention(z: torch.Tensor, y_txt: torch.Tensor, block: GuidanceBlock) -> torch.Tensor:
    """Text conditioning of a ``B x C x H x W`` stage feature map."""
    tokens, hw = _flatten(z)
    return _unflatten(block.text(tokens, y_txt), hw)


def phase2_visual_attention(z_sem: torch.Tensor, f: torch.Tensor, block: GuidanceBlock) -> torch.Tensor:
    """Visual-prompt conditioning; ``f`` is resampled to the stage's grid."""
    tokens, hw = _flatten(z_sem)
    return _unflatten(block.visual(tokens, resample_tokens(f, hw)), hw)


class SGGM(nn.Module):
    """One guidance block per stage, applied text-first then visual."""

    def __init__(self, stage_channels: dict[str, int], text_dim: int, visual_dim: int, hier_layers: Sequence[int], d_k: int = 32):
        super().__init__()
        self.hier_layers = tuple(hier_layers)
        self.blocks = nn.ModuleDict(
            {s: GuidanceBlock(s, stage_channels[s], text_dim, visual_dim, d_k) for s in STAGES}
        )
        self.trace: list[tuple[str, str, int]] | None = None

    def layer_for(self, stage: str) -> int:
        return stage_to_layer(stage, self.hier_layers)

    def forward(
        self, stage: str, z: torch.Tensor, y_txt: torch.Tensor, hier: HierPrompts, text: bool = True, visual: bool = True
    ) -> torch.Tensor:
        if stage not in self.blocks:
            raise ConfigError(f"no guidance block for stage {stage!r}")
        block = self.blocks[stage]
        layer = self.layer_for(stage)
        if visual and layer not in hier.features:
            raise ValidationError(f"hierarchical prompts lack layer {layer} needed by {stage}")
        if text:
            if self.trace is not None:
                self.trace.append(("text", stage, -1))
            z = phase1_text_attention(z, y_txt, block)
        if visual:
            if self.trace is not None:
                self.trace.append(("visual", stage, layer))
            z = phase2_visual_attention(z, hier.features[layer], block)
        return z


def apply_sggm(
    features: dict[str, torch.Tensor], y_txt: torch.Tensor, hier: HierPrompts, sggm: SGGM
) -> dict[str, torch.Tensor]:
    """Guide every stage's feature map; all nine stages must be present."""
    missing = [s for s in STAGES if s not in features]
    if missing:
        raise ConfigError(f"missing stage features {missing}")
    return {s: sggm(s, features[s], y_txt, hier) for s in STAGES}
