"""Small vision transformer shared by the optical teacher and the SAR student.

The base weights are a seeded, frozen random initialisation standing in for a
pretrained foundation model; only the low-rank adapters on the attention
projections and the linear head are trainable.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ShapeError, UpstreamArtifactError


@dataclass
class EncoderConfig:
    image_size: int = 64
    in_chans: int = 3
    depth: int = 8
    embed_dim: int = 128
    heads: int = 4
    mlp_ratio: float = 4.0
    patch_size: int = 8
    num_classes: int = 6
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    aligned_layers: tuple[int, ...] = (1, 3, 4, 5, 7)
    hier_layers: tuple[int, ...] = (3, 4, 5, 7)
    base_seed: int = 0

    def __post_init__(self):
        self.aligned_layers = tuple(int(x) for x in self.aligned_layers)
        self.hier_layers = tuple(int(x) for x in self.hier_layers)
        self.validate()

    def validate(self) -> None:
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if any(not 0 <= l < self.depth for l in self.aligned_layers):
            raise ConfigError(f"aligned layers {self.aligned_layers} out of range for depth {self.depth}")
        if list(self.aligned_layers) != sorted(set(self.aligned_layers)):
            raise ConfigError("aligned_layers must be strictly increasing")
        if list(self.hier_layers) != sorted(set(self.hier_layers)):
            raise ConfigError("hier_layers must be strictly increasing")
        if not set(self.hier_layers) <= set(self.aligned_layers):
            raise ConfigError("hier_layers must be a subset of aligned_layers")
        if len(self.hier_layers) != 4:
            raise ConfigError("hier_layers must hold exactly four layers")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def lora_scaling(self) -> float:
        return self.lora_alpha / self.lora_rank

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aligned_layers"] = list(self.aligned_layers)
        d["hier_layers"] = list(self.hier_layers)
        return d


@dataclass
class FeatureBundle:
    """Per-layer encoder outputs for a batch.

    ``attn_per_layer[l]`` is the head-averaged [CLS]->patch attention of
    block ``l``, renormalised over patches; ``cls_per_layer[l]`` and
    ``patch_tokens_per_layer[l]`` are the block's output tokens.
    """

    cls_per_layer: dict[int, torch.Tensor] = field(default_factory=dict)
    attn_per_layer: dict[int, torch.Tensor] = field(default_factory=dict)
    patch_tokens_per_layer: dict[int, torch.Tensor] = field(default_factory=dict)
    logits: torch.Tensor | None = None
    final_cls: torch.Tensor | None = None

    def detach(self) -> "FeatureBundle":
        d = lambda m: {k: v.detach() for k, v in m.items()}  # noqa: E731
        return FeatureBundle(
            d(self.cls_per_layer),
            d(self.attn_per_layer),
            d(self.patch_tokens_per_layer),
            None if self.logits is None else self.logits.detach(),
            None if self.final_cls is None else self.final_cls.detach(),
        )


def lora_forward(base_weight, x, adapter):
    """``W x + (alpha / r) B (A x)`` for ``adapter = (A, B, r, alpha)``.

    Works on numpy arrays and torch tensors alike; ``x`` may be a vector or
    a column-stacked matrix.
    """
    A, B, r, alpha = adapter
    if A.shape[0] != r or B.shape[1] != r or A.shape[1] != base_weight.shape[1] or B.shape[0] != base_weight.shape[0]:
        raise ShapeError(f"adapter shapes A{tuple(A.shape)} B{tuple(B.shape)} incompatible with W{tuple(base_weight.shape)}, r={r}")
    if x.shape[0] != base_weight.shape[1]:
        raise ShapeError(f"input of length {x.shape[0]} incompatible with W{tuple(base_weight.shape)}")
    return base_weight @ x + (alpha / r) * (B @ (A @ x))


class LoRALinear(nn.Module):
    """Frozen linear layer plus a zero-initialised low-rank update."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float = 0.0):
        super().__init__()
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * F.linear(F.linear(self.dropout(x), self.lora_A), self.lora_B)

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * self.lora_B @ self.lora_A


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, cfg: EncoderConfig):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        wrap = lambda: LoRALinear(nn.Linear(dim, dim), cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout)  # noqa: E731
        self.q, self.k, self.v, self.o = wrap(), wrap(), wrap(), wrap()

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = x.shape
        split = lambda t: t.view(b, n, self.heads, self.head_dim).transpose(1, 2)  # noqa: E731
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.o(out), attn


class Block(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.embed_dim
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, cfg.heads, cfg)
        self.norm2 = nn.LayerNorm(d)
        hidden = int(d * cfg.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a, attn = self.attn(self.norm1(x))
        x = x + a
        return x + self.mlp(self.norm2(x)), attn


class ViTEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, adapter_seed: int = 1):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        fork = torch.random.fork_rng(devices=[])
        with fork:
            torch.manual_seed(cfg.base_seed)
            self.patch_embed = nn.Conv2d(cfg.in_chans, d, cfg.patch_size, stride=cfg.patch_size)
            self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
            self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, d))
            nn.init.trunc_normal_(self.cls_token, std=0.02)
            nn.init.trunc_normal_(self.pos_embed, std=0.02)
            self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
            self.norm = nn.LayerNorm(d)
            for m in self.modules():
                if isinstance(m, nn.Linear):
                    nn.init.trunc_normal_(m.weight, std=0.02)
                    nn.init.zeros_(m.bias)
        self.head = nn.Linear(d, cfg.num_classes)
        self.register_buffer("input_mean", torch.zeros(cfg.in_chans))
        self.register_buffer("input_std", torch.ones(cfg.in_chans))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(adapter_seed)
            for m in self.modules():
                if isinstance(m, LoRALinear):
                    nn.init.kaiming_uniform_(m.lora_A, a=math.sqrt(5))
            nn.init.trunc_normal_(self.head.weight, std=0.02)
            nn.init.zeros_(self.head.bias)
        self.freeze_base()

    def freeze_base(self) -> None:
        for name, p in self.named_parameters():
            p.requires_grad_(self._is_trainable(name))

    @staticmethod
    def _is_trainable(name: str) -> bool:
        return "lora_" in name or name.startswith("head.")

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if self._is_trainable(n)]

    def base_state(self) -> dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self.named_parameters() if not self._is_trainable(n)}

    def set_input_normalization(self, mean, std) -> None:
        self.input_mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
        self.input_std.copy_(torch.as_tensor(std, dtype=torch.float32).clamp_min(1e-6))

    def forward(self, images: torch.Tensor, layers=None) -> FeatureBundle:
        """Encode a batch of ``B x C x H x W`` images in [0, 1]."""
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1] != cfg.in_chans:
            raise ShapeError(f"expected B x {cfg.in_chans} x H x W input, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % cfg.patch_size or w % cfg.patch_size:
            raise ShapeError(f"image size {h}x{w} not divisible by patch size {cfg.patch_size}")
        if (h // cfg.patch_size) * (w // cfg.patch_size) != cfg.num_patches:
            raise ShapeError(f"image size {h}x{w} does not match the configured {cfg.image_size}")
        wanted = set(cfg.aligned_layers if layers is None else layers)

        x = (images - self.input_mean[:, None, None]) / self.input_std[:, None, None]
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed

        bundle = FeatureBundle()
        for idx, block in enumerate(self.blocks):
            x, attn = block(x)
            if idx in wanted:
                cls_attn = attn[:, :, 0, 1:].mean(dim=1)
                bundle.attn_per_layer[idx] = cls_attn / cls_attn.sum(dim=-1, keepdim=True)
                bundle.cls_per_layer[idx] = x[:, 0]
                bundle.patch_tokens_per_layer[idx] = x[:, 1:]
        bundle.final_cls = self.norm(x)[:, 0]
        bundle.logits = self.head(bundle.final_cls)
        return bundle


def encode(images: torch.Tensor, model: ViTEncoder) -> FeatureBundle:
    """Deterministic eval-mode forward pass without gradient tracking."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(images)
    finally:
        model.train(was_training)


def classify(bundle: FeatureBundle) -> torch.Tensor:
    if bundle.logits is None:
        raise ShapeError("bundle carries no logits")
    return torch.sigmoid(bundle.logits)


def save_encoder(stem: str | Path, model: ViTEncoder, step: int, extra: dict | None = None) -> dict:
    manifest = {"kind": "encoder", "config": model.cfg.to_dict(), "step": int(step), **(extra or {})}
    return save_checkpoint(stem, model.state_dict(), manifest)


def load_encoder(stem: str | Path, expect_role: str | None = None) -> tuple[ViTEncoder, dict]:
    tensors, manifest = load_checkpoint(stem)
    if manifest.get("kind") != "encoder":
        raise UpstreamArtifactError(f"{stem} is not an encoder checkpoint")
    if expect_role is not None and manifest.get("role") != expect_role:
        raise UpstreamArtifactError(f"{stem} holds a {manifest.get('role')!r} encoder, expected {expect_role!r}")
    model = ViTEncoder(EncoderConfig(**manifest["config"]))
    model.load_state_dict(tensors)
    model.eval()
    return model, manifest
