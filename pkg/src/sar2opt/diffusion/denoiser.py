"""Pixel-space conditional denoiser: a small U-Net plus a guided control branch.

Images are folded with space-to-depth before the first convolution so a
64 x 64 x 3 input runs at 16 x 16 x 48. The control branch mirrors the
base U-Net, receives the SAR image through a zero-initialised hint
convolution, carries a guidance block at each of its nine stages, and
feeds the base network through zero-initialised 1x1 convolutions.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, ShapeError
from ..prompt import PromptEmbedder, PromptVocabulary
from ..sggm import SGGM, STAGES, HierPrompts
from .uncertainty import confidence_from_logits


@dataclass
class DenoiserConfig:
    image_size: int = 64
    fold: int = 4
    channels: tuple[int, ...] = (32, 64, 64, 64)
    time_dim: int = 128
    text_dim: int = 64
    visual_dim: int = 128
    d_k: int = 32
    hier_layers: tuple[int, ...] = (3, 4, 5, 7)
    use_text: bool = True
    use_visual: bool = True
    use_control: bool = True
    groups: int = 8

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.hier_layers = tuple(self.hier_layers)

    def validate(self) -> None:
        if len(self.channels) != 4:
            raise ConfigError("the U-Net has exactly four resolution stages")
        if self.image_size % (self.fold * 4):
            raise ConfigError("image_size must be divisible by 4 * fold")
        if any(c % self.groups for c in self.channels):
            raise ConfigError(f"channels must be multiples of groups={self.groups}")

    @property
    def folded_channels(self) -> int:
        return 3 * self.fold**2

    def stage_channels(self) -> dict[str, int]:
        c = self.channels
        return {
            "enc1": c[0], "enc2": c[1], "enc3": c[2], "enc4": c[3], "mid": c[3],
            "dec1": c[3], "dec2": c[2], "dec3": c[1], "dec4": c[0],
        }

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DenoiserOutput:
    eps_pred: torch.Tensor
    confidence: torch.Tensor
    stages: dict[str, torch.Tensor] = field(default_factory=dict, repr=False)


@dataclass
class Condition:
    """SAR image, prompt token ids and hierarchical student features."""

    sar3: torch.Tensor
    token_ids: torch.Tensor
    hier: HierPrompts

    def __len__(self) -> int:
        return self.sar3.shape[0]

    def select(self, idx) -> "Condition":
        return Condition(self.sar3[idx], self.token_ids[idx], HierPrompts({l: f[idx] for l, f in self.hier.features.items()}))

    def with_tokens(self, token_ids: torch.Tensor) -> "Condition":
        return Condition(self.sar3, token_ids, self.hier)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def zero_conv(c_in: int, c_out: int) -> nn.Conv2d:
    conv = nn.Conv2d(c_in, c_out, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class UNet(nn.Module):
    """Four encoder stages, a middle block and four decoder stages.

    Stage resolutions are 1, 1/2, 1/4, 1/4 of the folded grid on the way
    down and mirrored on the way up. ``forward`` accepts a per-stage hook
    that may rewrite each stage's output and optional residuals added to
    them, which is how the control branch talks to the base network.
    """

    def __init__(self, cfg: DenoiserConfig, c_in: int):
        super().__init__()
        c, td, g = cfg.channels, cfg.time_dim, cfg.groups
        self.stem = nn.Conv2d(c_in, c[0], 3, padding=1)
        self.enc = nn.ModuleList([ResBlock(c[0], c[0], td, g), ResBlock(c[0], c[1], td, g), ResBlock(c[1], c[2], td, g), ResBlock(c[2], c[3], td, g)])
        self.down = nn.ModuleList([nn.Conv2d(c[0], c[0], 3, stride=2, padding=1), nn.Conv2d(c[1], c[1], 3, stride=2, padding=1)])
        self.mid = ResBlock(c[3], c[3], td, g)
        self.dec = nn.ModuleList([ResBlock(2 * c[3], c[3], td, g), ResBlock(c[3] + c[2], c[2], td, g), ResBlock(c[2] + c[1], c[1], td, g), ResBlock(c[1] + c[0], c[0], td, g)])
        self.up = nn.ModuleList([nn.Conv2d(c[2], c[2], 3, padding=1), nn.Conv2d(c[1], c[1], 3, padding=1)])

    def forward(self, x, temb, hook=None, residuals=None, stem_extra=None):
        stages: dict[str, torch.Tensor] = {}

        def finish(name: str, h: torch.Tensor) -> torch.Tensor:
            if hook is not None:
                h = hook(name, h)
            if residuals is not None:
                h = h + residuals[name]
            stages[name] = h
            return h

        h = self.stem(x)
        if stem_extra is not None:
            h = h + stem_extra
        skips = []
        for i, block in enumerate(self.enc):
            h = finish(f"enc{i + 1}", block(h, temb))
            skips.append(h)
            if i < 2:
                h = self.down[i](h)
        h = finish("mid", self.mid(h, temb))
        for i, block in enumerate(self.dec):
            h = finish(f"dec{i + 1}", block(torch.cat([h, skips[3 - i]], dim=1), temb))
            if i in (1, 2):
                h = self.up[i - 1](F.interpolate(h, scale_factor=2, mode="nearest"))
        return h, stages


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig, vocab: PromptVocabulary, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            td, cf = cfg.time_dim, cfg.folded_channels
            self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
            self.base = UNet(cfg, cf)
            self.out_norm = nn.GroupNorm(cfg.groups, cfg.channels[0])
            self.eps_head = nn.Conv2d(cfg.channels[0], cf, 3, padding=1)
            # per-channel, time-dependent gain on the folded input; the trunk
            # is narrower than the folded image, so white noise passes here
            self.skip_gain = nn.Linear(td, cf)
            nn.init.zeros_(self.skip_gain.weight)
            nn.init.zeros_(self.skip_gain.bias)
            self.conf_head = nn.Conv2d(cfg.channels[0], cfg.fold**2, 3, padding=1)
            nn.init.zeros_(self.conf_head.weight)
            nn.init.zeros_(self.conf_head.bias)
            self.embedder = PromptEmbedder(vocab, cfg.text_dim)
            # the control branch starts as a copy of the base network
            self.control = copy.deepcopy(self.base)
            self.hint = zero_conv(cf, cfg.channels[0])
            chans = cfg.stage_channels()
            self.connect = nn.ModuleDict({s: zero_conv(chans[s], chans[s]) for s in STAGES})
            self.sggm = SGGM(chans, cfg.text_dim, cfg.visual_dim, cfg.hier_layers, cfg.d_k)

    def fold(self, x: torch.Tensor) -> torch.Tensor:
        return F.pixel_unshuffle(x, self.cfg.fold)

    def _guide(self, y_txt: torch.Tensor, hier: HierPrompts):
        text, visual = self.cfg.use_text, self.cfg.use_visual
        return lambda stage, z: self.sggm(stage, z, y_txt, hier, text=text, visual=visual)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: Condition) -> DenoiserOutput:
        size = self.cfg.image_size
        if x_t.shape[1:] != (3, size, size) or cond.sar3.shape[1:] != (3, size, size):
            raise ShapeError(f"expected B x 3 x {size} x {size} inputs, got {tuple(x_t.shape)} and {tuple(cond.sar3.shape)}")
        if len(cond) != x_t.shape[0]:
            raise ShapeError("condition batch size differs from x_t")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(x_t.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim))
        x = self.fold(x_t)

        residuals = None
        if self.cfg.use_control:
            y_txt = self.embedder(cond.token_ids)
            hint = self.hint(self.fold(cond.sar3 * 2.0 - 1.0))
            _, ctrl = self.control(x, temb, hook=self._guide(y_txt, cond.hier), stem_extra=hint)
            residuals = {s: self.connect[s](ctrl[s]) for s in STAGES}
        h, stages = self.base(x, temb, residuals=residuals)
        h = F.silu(self.out_norm(h))
        eps = F.pixel_shuffle(self.eps_head(h) + self.skip_gain(temb)[:, :, None, None] * x, self.cfg.fold)
        conf = confidence_from_logits(F.pixel_shuffle(self.conf_head(h), self.cfg.fold))
        return DenoiserOutput(eps, conf, stages)
