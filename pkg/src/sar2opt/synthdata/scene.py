"""Procedural paired SAR/optical scenes with per-pixel land-cover labels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import ConfigError


@dataclass(frozen=True)
class ClassStyle:
    """Rendering parameters of one land-cover class.

    ``texture`` is the optical texture amplitude (reflectance units),
    ``sar_texture`` the standard deviation in dB of the smooth backscatter
    modulation applied before speckle.
    """

    name: str
    rgb: tuple[float, float, float]
    texture: float
    vv_db: float
    vh_db: float
    sar_texture: float


# Mean backscatter values follow the usual C-band ordering
# (water darkest, urban brightest, forest with strong VH volume return).
DEFAULT_CLASSES: tuple[ClassStyle, ...] = (
    ClassStyle("water", (0.08, 0.18, 0.42), 0.02, -21.0, -28.0, 0.6),
    ClassStyle("forest", (0.10, 0.34, 0.12), 0.06, -7.5, -12.5, 0.8),
    ClassStyle("cropland", (0.62, 0.56, 0.22), 0.07, -11.0, -19.0, 1.0),
    ClassStyle("urban", (0.58, 0.55, 0.55), 0.10, -2.0, -10.0, 1.5),
    ClassStyle("bare", (0.66, 0.44, 0.30), 0.04, -14.5, -24.0, 0.7),
    ClassStyle("grassland", (0.36, 0.60, 0.28), 0.05, -16.0, -20.0, 0.8),
)

DEFAULT_MIXTURE: tuple[float, ...] = (0.22, 0.22, 0.18, 0.12, 0.12, 0.14)


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    patch_size: int = 8
    grid: int = 2
    jitter: float = 0.35
    warp: float = 5.0
    classes: tuple[ClassStyle, ...] = DEFAULT_CLASSES
    mixture: tuple[float, ...] = DEFAULT_MIXTURE

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]


@dataclass
class Scene:
    label_map: np.ndarray
    present_classes: frozenset[int]
    optical: np.ndarray
    sar_clean: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    def multi_hot(self, num_classes: int) -> np.ndarray:
        y = np.zeros(num_classes, dtype=np.float32)
        y[sorted(self.present_classes)] = 1.0
        return y


def normalize_mixture(
    class_mixture: Mapping[int | str, float] | Sequence[float] | None,
    classes: Sequence[ClassStyle] = DEFAULT_CLASSES,
) -> np.ndarray:
    """Return the mixture as a probability vector over ``classes``.

    Accepts a full-length sequence, or a mapping keyed by class id or name.
    """
    if class_mixture is None:
        return np.full(len(classes), 1.0 / len(classes))
    if isinstance(class_mixture, Mapping):
        if not class_mixture:
            raise ConfigError("class mixture is empty")
        names = [c.name for c in classes]
        p = np.zeros(len(classes))
        for key, prob in class_mixture.items():
            if isinstance(key, str):
                if key not in names:
                    raise ConfigError(f"unknown class {key!r} in mixture")
                idx = names.index(key)
            else:
                idx = int(key)
                if not 0 <= idx < len(classes):
                    raise ConfigError(f"class id {idx} out of range")
            p[idx] += float(prob)
    else:
        p = np.asarray(class_mixture, dtype=float)
        if p.size == 0:
            raise ConfigError("class mixture is empty")
        if p.shape != (len(classes),):
            raise ConfigError(f"mixture has {p.size} entries, expected {len(classes)}")
    if np.any(~np.isfinite(p)) or np.any(p < 0):
        raise ConfigError("mixture probabilities must be finite and non-negative")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ConfigError(f"mixture probabilities sum to {p.sum():.6f}, expected 1")
    return p / p.sum()


def _partition(rng: np.random.Generator, size: int, grid: int, jitter: float, warp: float) -> np.ndarray:
    """Jittered-grid Voronoi cells with smoothly warped boundaries."""
    cell = size / grid
    gi, gj = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    offsets = 0.5 + rng.uniform(-jitter, jitter, size=(2, grid, grid))
    centers = np.stack([(gi + offsets[0]) * cell, (gj + offsets[1]) * cell], axis=-1).reshape(-1, 2)

    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    if warp > 0:
        fields = gaussian_filter(rng.standard_normal((2, size, size)), sigma=(0, size / 8, size / 8), mode="wrap")
        fields /= fields.std(axis=(1, 2), keepdims=True) + 1e-12
        yy = yy + warp * fields[0]
        xx = xx + warp * fields[1]
    d2 = (yy[..., None] - centers[:, 0]) ** 2 + (xx[..., None] - centers[:, 1]) ** 2
    return np.argmin(d2, axis=-1)


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, int], sigma: float) -> np.ndarray:
    n = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def generate_scene(
    seed: int,
    size: int | None = None,
    class_mixture: Mapping[int | str, float] | Sequence[float] | None = None,
    config: SceneConfig | None = None,
) -> Scene:
    """Render one co-registered SAR/optical scene.

    The label map is a warped Voronoi tessellation over a jittered grid;
    every cell draws its class independently from ``class_mixture``, so
    the expected area fraction of a class equals its mixture probability.
    """
    config = config or SceneConfig()
    size = config.size if size is None else int(size)
    if size < 32 or size % config.patch_size:
        raise ConfigError(f"size must be >= 32 and divisible by {config.patch_size}, got {size}")
    mixture = normalize_mixture(class_mixture if class_mixture is not None else config.mixture, config.classes)
    rng = np.random.default_rng(seed)

    cells = _partition(rng, size, config.grid, config.jitter, config.warp)
    cell_class = rng.choice(len(config.classes), size=config.grid**2, p=mixture)
    label_map = cell_class[cells].astype(np.int64)

    rgb = np.array([c.rgb for c in config.classes])
    tex = np.array([c.texture for c in config.classes])
    db = np.array([[c.vv_db, c.vh_db] for c in config.classes])
    sar_tex = np.array([c.sar_texture for c in config.classes])

    coarse = _smooth_noise(rng, (size, size), sigma=2.5)
    fine = rng.standard_normal((size, size))
    tint = rng.standard_normal(3) * 0.15
    lum = 0.75 * coarse + 0.25 * fine
    optical = rgb[label_map] + (tex[label_map] * lum)[..., None] * (1.0 + tint)
    optical = np.clip(optical, 0.0, 1.0)

    sar_mod = _smooth_noise(rng, (size, size), sigma=3.0)
    sar_db = db[label_map] + (sar_tex[label_map] * sar_mod)[..., None]
    sar_clean = 10.0 ** (sar_db / 10.0)

    return Scene(
        label_map=label_map,
        present_classes=frozenset(int(c) for c in np.unique(label_map)),
        optical=optical,
        sar_clean=sar_clean,
        seed=int(seed),
    )
