"""SAR/optical radiometric preprocessing, paired augmentation and splitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence, TypeVar

import numpy as np

from ..errors import ConfigError, ValidationError
from .speckle import refined_lee

log = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass(frozen=True)
class ChannelStats:
    mean: float
    std: float
    lo: float
    hi: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "lo": self.lo, "hi": self.hi, "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(float(d["mean"]), float(d["std"]), float(d["lo"]), float(d["hi"]), bool(d.get("degenerate", False)))


@dataclass
class PreprocessedPair:
    sar3: np.ndarray
    optical: np.ndarray
    norm_stats: dict = field(default_factory=dict)
    label_map: np.ndarray | None = None


def channel_stats(values: np.ndarray, sigma: float = 3.0) -> ChannelStats:
    """Clip bounds ``mean +- sigma*std`` tightened to the observed range."""
    v = np.asarray(values, dtype=float)
    mean, std = float(v.mean()), float(v.std())
    if not np.isfinite(std) or std <= 1e-12 * max(1.0, abs(mean)):
        return ChannelStats(mean, 0.0, mean, mean, degenerate=True)
    lo = max(float(v.min()), mean - sigma * std)
    hi = min(float(v.max()), mean + sigma * std)
    return ChannelStats(mean, std, lo, hi)


def clip_and_scale(channel: np.ndarray, stats: ChannelStats | None = None) -> tuple[np.ndarray, ChannelStats]:
    """Clip to the stats bounds and min-max scale into [0, 1].

    A degenerate (zero-variance) channel maps to the constant 0.5.
    """
    stats = channel_stats(channel) if stats is None else stats
    if stats.degenerate or stats.hi <= stats.lo:
        return np.full(np.shape(channel), 0.5), replace(stats, degenerate=True)
    scaled = (np.clip(channel, stats.lo, stats.hi) - stats.lo) / (stats.hi - stats.lo)
    return scaled, stats


def unscale(channel: np.ndarray, stats: ChannelStats) -> np.ndarray:
    return stats.lo + np.asarray(channel) * (stats.hi - stats.lo)


def sar_to_db(intensity: np.ndarray) -> np.ndarray:
    return 10.0 * np.log10(np.maximum(intensity, 1e-10))


def sar_channels(sar_speckled: np.ndarray, window: int = 7, looks: float | None = None, to_db: bool = True) -> np.ndarray:
    """Despeckled (VV, VH, VV-VH) stack before clipping and scaling."""
    sar = np.asarray(sar_speckled, dtype=float)
    if sar.ndim != 3 or sar.shape[-1] != 2:
        raise ValidationError(f"expected H x W x 2 SAR input, got {sar.shape}")
    if not np.all(np.isfinite(sar)):
        raise ValidationError("SAR input contains non-finite values")
    bands = [refined_lee(sar[..., c], window=window, looks=looks) for c in range(2)]
    if to_db:
        bands = [sar_to_db(b) for b in bands]
    return np.stack([bands[0], bands[1], bands[0] - bands[1]], axis=-1)


def preprocess(
    sar_speckled: np.ndarray,
    optical: np.ndarray,
    *,
    window: int = 7,
    looks: float | None = None,
    to_db: bool = True,
    reference: dict | None = None,
    label_map: np.ndarray | None = None,
) -> PreprocessedPair:
    """Refined Lee, VV-VH expansion, 3-sigma clipping and min-max scaling.

    Without ``reference`` the clip bounds and scaling range come from the
    image itself. With ``reference`` (``{"sar": [ChannelStats]*3,
    "optical": [ChannelStats]*3}``, typically from
    :func:`fit_reference_stats`) every image shares dataset-level bounds,
    which keeps absolute radiometry comparable across scenes.
    """
    opt = np.asarray(optical, dtype=float)
    if not np.all(np.isfinite(opt)):
        raise ValidationError("optical input contains non-finite values")
    sar3_raw = sar_channels(sar_speckled, window=window, looks=looks, to_db=to_db)

    sar_out, opt_out = np.empty_like(sar3_raw), np.empty_like(opt)
    stats: dict[str, list[dict]] = {"sar": [], "optical": []}
    for key, src, dst in (("sar", sar3_raw, sar_out), ("optical", opt, opt_out)):
        for c in range(src.shape[-1]):
            ref = None if reference is None else reference[key][c]
            dst[..., c], st = clip_and_scale(src[..., c], ref)
            if st.degenerate:
                log.warning("%s channel %d has zero variance; mapped to 0.5", key, c)
            stats[key].append(st.to_dict())
    return PreprocessedPair(sar3=sar_out, optical=opt_out, norm_stats=stats, label_map=label_map)


def fit_reference_stats(
    sar_stacks: Sequence[np.ndarray], opticals: Sequence[np.ndarray], sigma: float = 3.0
) -> dict[str, list[ChannelStats]]:
    """Dataset-level clip/scale bounds from raw (pre-scaling) channel stacks."""
    sar = np.stack(sar_stacks)
    opt = np.stack(opticals)
    return {
        "sar": [channel_stats(sar[..., c], sigma) for c in range(sar.shape[-1])],
        "optical": [channel_stats(opt[..., c], sigma) for c in range(opt.shape[-1])],
    }


def flip_pair(pair: PreprocessedPair, horizontal: bool, vertical: bool) -> PreprocessedPair:
    axes = tuple(a for a, on in ((1, horizontal), (0, vertical)) if on)
    if not axes:
        return pair

    def f(a):
        return None if a is None else np.flip(a, axis=axes).copy()

    return PreprocessedPair(f(pair.sar3), f(pair.optical), pair.norm_stats, f(pair.label_map))


def augment(pair: PreprocessedPair, seed: int, hflip: bool = True, vflip: bool = True) -> PreprocessedPair:
    """Random horizontal/vertical flips shared by both modalities and the labels."""
    rng = np.random.default_rng(seed)
    do_h, do_v = rng.random(2) < 0.5
    return flip_pair(pair, horizontal=hflip and bool(do_h), vertical=vflip and bool(do_v))


def split_dataset(items: Sequence[T], ratio: float = 0.8, seed: int = 0) -> tuple[list[T], list[T]]:
    """Deterministic shuffled split into (train, test)."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    if len(items) == 0:
        raise ConfigError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(items))
    n_train = int(round(ratio * len(items)))
    return [items[i] for i in order[:n_train]], [items[i] for i in order[n_train:]]
