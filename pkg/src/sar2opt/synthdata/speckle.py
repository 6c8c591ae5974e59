"""Multiplicative speckle simulation and refined Lee despeckling."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate, uniform_filter

from ..errors import ConfigError, ShapeError


def apply_speckle(sar_clean: np.ndarray, looks: int = 4, seed: int | None = None) -> np.ndarray:
    """Multiply by unit-mean gamma speckle with variance ``1/looks``."""
    if looks < 1:
        raise ConfigError(f"looks must be >= 1, got {looks}")
    rng = np.random.default_rng(seed)
    sar = np.asarray(sar_clean, dtype=float)
    noise = rng.gamma(shape=looks, scale=1.0 / looks, size=sar.shape)
    # gamma draws can underflow to exactly 0 for looks=1
    return sar * np.maximum(noise, np.finfo(float).tiny)


def _subwindow_geometry(window: int) -> tuple[int, int]:
    size = max(1, window // 2)
    if size % 2 == 0:
        size -= 1
    return size, (window - size) // 2


# Sobel-style edge detectors applied to the 3x3 grid of sub-window means.
# Each entry: (mask, index of negative-side sub-mean, index of positive-side sub-mean),
# sub-means indexed row-major 0..8. Axis-aligned orientations come first so that
# ties resolve toward them.
_GRADIENTS = (
    (np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]), 3, 5),  # vertical edge
    (np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]]), 1, 7),  # horizontal edge
    (np.array([[0, 1, 2], [-1, 0, 1], [-2, -1, 0]]), 6, 2),  # edge along main diagonal
    (np.array([[2, 1, 0], [1, 0, -1], [0, -1, -2]]), 8, 0),  # edge along anti-diagonal
)


def directional_masks(window: int) -> np.ndarray:
    """The 8 edge-aligned half windows, ordered (neg, pos) per orientation.

    Each half window contains the centre row, column or diagonal.
    """
    c = window // 2
    i, j = np.mgrid[:window, :window]
    masks = [
        j <= c, j >= c,  # left, right
        i <= c, i >= c,  # top, bottom
        i >= j, i <= j,  # lower-left, upper-right triangles
        i + j >= window - 1, i + j <= window - 1,  # lower-right, upper-left triangles
    ]
    return np.stack(masks).astype(float)


def refined_lee(image: np.ndarray, window: int = 7, looks: float | None = None) -> np.ndarray:
    """Refined Lee MMSE filter for a single-channel intensity image.

    The edge orientation at each pixel is the strongest response of four
    gradient detectors on a 3x3 grid of sub-window means; local statistics
    are then taken over the half window lying on the same side of the edge
    as the centre pixel. ``looks`` sets the speckle variance ``1/looks``;
    when omitted it is estimated as the median local coefficient of
    variation squared.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ShapeError(f"refined_lee expects a 2-D image, got shape {img.shape}")
    if window < 3 or window % 2 == 0:
        raise ConfigError(f"window must be odd and >= 3, got {window}")

    # work relative to one pixel so that constant inputs are reproduced exactly
    ref = img.flat[0]
    dev = img - ref

    sub, step = _subwindow_geometry(window)
    sub_mean = np.pad(uniform_filter(dev, size=sub, mode="reflect"), step, mode="symmetric")
    h, w = img.shape
    grid = np.stack(
        [
            sub_mean[step + a * step : step + a * step + h, step + b * step : step + b * step + w]
            for a in (-1, 0, 1)
            for b in (-1, 0, 1)
        ]
    )
    centre = grid[4]
    responses = np.stack([np.abs(np.tensordot(k.ravel(), grid, axes=1)) for k, _, _ in _GRADIENTS])
    orientation = np.argmax(responses, axis=0)
    neg_idx = np.array([g[1] for g in _GRADIENTS])[orientation]
    pos_idx = np.array([g[2] for g in _GRADIENTS])[orientation]
    neg = np.take_along_axis(grid, neg_idx[None], axis=0)[0]
    pos = np.take_along_axis(grid, pos_idx[None], axis=0)[0]
    side = (np.abs(pos - centre) < np.abs(neg - centre)).astype(int)
    choice = 2 * orientation + side

    masks = directional_masks(window)
    means = np.empty((8, h, w))
    sq = np.empty((8, h, w))
    for k, mask in enumerate(masks):
        kern = mask / mask.sum()
        means[k] = correlate(dev, kern, mode="reflect")
        sq[k] = correlate(dev * dev, kern, mode="reflect")
    mean_dev = np.take_along_axis(means, choice[None], axis=0)[0]
    var_y = np.maximum(np.take_along_axis(sq, choice[None], axis=0)[0] - mean_dev**2, 0.0)
    mean = ref + mean_dev

    if looks is None:
        local_mean = ref + uniform_filter(dev, size=window, mode="reflect")
        local_var = np.maximum(uniform_filter(dev * dev, size=window, mode="reflect") - (local_mean - ref) ** 2, 0.0)
        cv2 = local_var / np.maximum(local_mean**2, np.finfo(float).tiny)
        noise_var = float(np.median(cv2))
    else:
        if looks <= 0:
            raise ConfigError(f"looks must be positive, got {looks}")
        noise_var = 1.0 / looks

    var_x = np.maximum((var_y - mean**2 * noise_var) / (1.0 + noise_var), 0.0)
    gain = np.divide(var_x, var_y, out=np.zeros_like(var_y), where=var_y > 0)
    return ref + mean_dev + gain * (dev - mean_dev)
