"""Image-quality metrics and encoder-space distribution distances.

Images are ``H x W x C`` float arrays in [0, 1]. ``efid`` and ``ekid``
operate on feature vectors from the optical teacher; they are internal
yardsticks and are not comparable to Inception-based FID/KID.
"""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ShapeError, UpstreamArtifactError, ValidationError
from . import io

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
_SAM_EPS = 1e-8
_LAPLACIAN = np.array([[-1, -1, -1], [-1, 8, -1], [-1, -1, -1]], dtype=float)


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    return x, y


def ssim(x, y, sigma: float = 1.5, truncate_size: int = 11, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean Gaussian-window SSIM, averaged over channels.

    Local statistics use an 11 x 11 Gaussian (sigma 1.5) with sample
    covariance correction; the mean is taken over pixels at least half a
    window from the border.
    """
    x, y = _pair(x, y)
    radius = truncate_size // 2
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    n = truncate_size**2
    cov_norm = n / (n - 1)
    vals = []
    for c in range(x.shape[-1]):
        a, b = x[..., c], y[..., c]
        filt = lambda v: ndimage.gaussian_filter(v, sigma, truncate=radius / sigma, mode="reflect")  # noqa: E731
        ua, ub = filt(a), filt(b)
        vaa = cov_norm * (filt(a * a) - ua * ua)
        vbb = cov_norm * (filt(b * b) - ub * ub)
        vab = cov_norm * (filt(a * b) - ua * ub)
        s = ((2 * ua * ub + c1) * (2 * vab + c2)) / ((ua**2 + ub**2 + c1) * (vaa + vbb + c2))
        vals.append(s[radius:-radius, radius:-radius].mean())
    return float(np.mean(vals))


def sam(x, y) -> float:
    """Mean spectral angle in radians between per-pixel channel vectors.

    Uses ``2 atan2(|u - v|, |u + v|)`` on the unit vectors, which stays
    accurate for nearly parallel spectra where ``arccos`` loses precision.
    Zero vectors are guarded with a 1e-8 norm floor.
    """
    x, y = _pair(x, y)
    u = x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), _SAM_EPS)
    v = y / np.maximum(np.linalg.norm(y, axis=-1, keepdims=True), _SAM_EPS)
    angle = 2 * np.arctan2(np.linalg.norm(u - v, axis=-1), np.linalg.norm(u + v, axis=-1))
    return float(angle.mean())


def scc(x, y) -> tuple[float, bool]:
    """Channel-averaged correlation of Laplacian high-pass images.

    Returns ``(value, degenerate)``; a channel whose high-pass has zero
    variance contributes 0 and sets the flag.
    """
    x, y = _pair(x, y)
    vals, degenerate = [], False
    for c in range(x.shape[-1]):
        hx = ndimage.convolve(x[..., c], _LAPLACIAN, mode="reflect").ravel()
        hy = ndimage.convolve(y[..., c], _LAPLACIAN, mode="reflect").ravel()
        hx, hy = hx - hx.mean(), hy - hy.mean()
        denom = np.sqrt((hx * hx).sum() * (hy * hy).sum())
        if denom < 1e-12:
            degenerate = True
            vals.append(0.0)
        else:
            vals.append(float((hx * hy).sum() / denom))
    return float(np.mean(vals)), degenerate


def uiqi(a, b, window: int | None = 8) -> float:
    """Universal image quality index, averaged over sliding windows.

    ``window=None`` evaluates a single global index. Windows where both
    signals are flat count as 1 when their means agree.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if window is None:
        ma, mb = a.mean(), b.mean()
        va, vb = a.var(), b.var()
        cab = ((a - ma) * (b - mb)).mean()
        return float(_q(ma, mb, va, vb, cab))
    box = lambda v: ndimage.uniform_filter(v, window, mode="reflect")  # noqa: E731
    ma, mb = box(a), box(b)
    va, vb = box(a * a) - ma**2, box(b * b) - mb**2
    cab = box(a * b) - ma * mb
    return float(np.mean(_q(ma, mb, np.maximum(va, 0), np.maximum(vb, 0), cab)))


def _q(ma, mb, va, vb, cab):
    num = 4 * cab * ma * mb
    den = (va + vb) * (ma**2 + mb**2)
    ok = den > 1e-12
    # flat windows score 1 only when both signals are the same constant
    flat = np.where(np.isclose(ma, mb) & np.isclose(va, vb), 1.0, 0.0)
    return np.where(ok, num / np.where(ok, den, 1.0), flat)


def d_lambda(pred, ref, p: float = 1.0, window: int | None = 8) -> float:
    """Spectral distortion: p-th root of the mean over ordered band pairs of
    ``|Q(pred_i, pred_j) - Q(ref_i, ref_j)|^p``."""
    pred, ref = _pair(pred, ref)
    bands = pred.shape[-1]
    if bands < 2:
        raise ValidationError("spectral distortion needs at least two bands")
    diffs = [
        abs(uiqi(pred[..., i], pred[..., j], window) - uiqi(ref[..., i], ref[..., j], window)) ** p
        for i in range(bands)
        for j in range(bands)
        if i != j
    ]
    return float(np.mean(diffs) ** (1.0 / p))


def _sqrtm_psd(c: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((c + c.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def efid(features_a, features_b, shrinkage: float = 1e-6) -> tuple[float, bool]:
    """Frechet distance between Gaussian fits to two feature sets.

    ``Tr((C_a C_b)^{1/2})`` is evaluated as the trace of the square root of
    the symmetric ``C_a^{1/2} C_b C_a^{1/2}``. Sets with at most ``d``
    samples get ``shrinkage * I`` added to both covariances and the flag set.
    """
    a, b = np.asarray(features_a, dtype=float), np.asarray(features_b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("feature sets must be N x d with equal d")
    d = a.shape[1]
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca, cb = np.atleast_2d(np.cov(a, rowvar=False)), np.atleast_2d(np.cov(b, rowvar=False))
    shrunk = min(len(a), len(b)) <= d
    if shrunk:
        ca, cb = ca + shrinkage * np.eye(d), cb + shrinkage * np.eye(d)
    sa = _sqrtm_psd(ca)
    w = np.linalg.eigvalsh(sa @ cb @ sa)
    tr_cross = np.sqrt(np.clip(w, 0, None)).sum()
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(ca) + np.trace(cb) - 2 * tr_cross)
    return max(value, 0.0), shrunk


def ekid(features_a, features_b) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel ``(<x, y> / d + 1)^3``."""
    a, b = np.asarray(features_a, dtype=float), np.asarray(features_b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValidationError("each feature set needs at least two samples")
    d = a.shape[1]
    k = lambda u, v: (u @ v.T / d + 1.0) ** 3  # noqa: E731
    kaa, kbb, kab = k(a, a), k(b, b), k(a, b)
    m, n = len(a), len(b)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2 * kab.mean())


@dataclass
class MetricReport:
    per_image: dict[str, dict[str, float]]
    aggregate: dict[str, float]
    config: dict
    flags: dict[str, list[str]] = field(default_factory=dict)
    unmatched: dict[str, list[str]] = field(default_factory=dict)
    schema: int = REPORT_SCHEMA

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [f"{'metric':<10}{'value':>12}"]
        rows += [f"{k:<10}{v:>12.4f}" for k, v in self.aggregate.items()]
        return "\n".join(rows)


_IGNORED = re.compile(r"_(sar|label|conf)$")


def _image_index(directory: Path) -> dict[str, Path]:
    out = {}
    for path in sorted(directory.glob("*.png")):
        if _IGNORED.search(path.stem):
            continue
        out[re.sub(r"_opt$", "", path.stem)] = path
    return out


def image_metrics(pred: np.ndarray, ref: np.ndarray, window: int | None = 8, p: float = 1.0) -> tuple[dict[str, float], bool]:
    value, degenerate = scc(pred, ref)
    return {"ssim": ssim(pred, ref), "sam": sam(pred, ref), "scc": value, "d_lambda": d_lambda(pred, ref, p, window)}, degenerate


def evaluate_images(
    preds: dict[str, np.ndarray],
    refs: dict[str, np.ndarray],
    feature_fn=None,
    window: int | None = 8,
    p: float = 1.0,
) -> MetricReport:
    """Per-image metrics over matching ids plus eFID/eKID when ``feature_fn`` maps an image stack to features."""
    ids = sorted(set(preds) & set(refs))
    unmatched = {"pred_only": sorted(set(preds) - set(refs)), "ref_only": sorted(set(refs) - set(preds))}
    if not ids:
        raise ValidationError("no matching images between prediction and reference sets")
    per_image, flags = {}, {"scc_degenerate": [], "efid_shrinkage": []}
    for i in ids:
        per_image[i], degenerate = image_metrics(preds[i], refs[i], window, p)
        if degenerate:
            flags["scc_degenerate"].append(i)
    aggregate = {k: float(np.mean([m[k] for m in per_image.values()])) for k in ("ssim", "sam", "scc", "d_lambda")}
    if feature_fn is not None:
        fa = feature_fn(np.stack([preds[i] for i in ids]))
        fb = feature_fn(np.stack([refs[i] for i in ids]))
        aggregate["efid"], shrunk = efid(fa, fb)
        if shrunk:
            flags["efid_shrinkage"].append("all")
        aggregate["ekid"] = ekid(fa, fb) if len(ids) >= 2 else float("nan")
    config = {"ssim_window": 11, "ssim_sigma": 1.5, "uiqi_window": window, "d_lambda_p": p, "ekid_kernel": "cubic polynomial"}
    return MetricReport(per_image, aggregate, config, flags, unmatched)


def evaluate_run(pred_dir, ref_dir, feature_fn=None, strict: bool = False, window: int | None = 8, p: float = 1.0) -> MetricReport:
    """Evaluate matching PNGs in two directories.

    Reference files may carry an ``_opt`` suffix; SAR, label and confidence
    images are ignored. Unmatched files are listed in the report, or raise
    in ``strict`` mode.
    """
    pred_dir, ref_dir = Path(pred_dir), Path(ref_dir)
    for d in (pred_dir, ref_dir):
        if not d.is_dir():
            raise UpstreamArtifactError(f"image directory {d} not found")
    pred_paths, ref_paths = _image_index(pred_dir), _image_index(ref_dir)
    missing = sorted(set(pred_paths) ^ set(ref_paths))
    if missing:
        if strict:
            raise ValidationError(f"unmatched images: {missing}")
        log.warning("skipping unmatched images %s", missing)
    keep = set(pred_paths) & set(ref_paths)
    preds = {i: io.from_uint(io.read_png(pred_paths[i])) for i in keep}
    refs = {i: io.from_uint(io.read_png(ref_paths[i])) for i in keep}
    report = evaluate_images(preds, refs, feature_fn, window, p)
    report.unmatched = {
        "pred_only": sorted(set(pred_paths) - set(ref_paths)),
        "ref_only": sorted(set(ref_paths) - set(pred_paths)),
    }
    return report


def write_report(path, report: MetricReport) -> None:
    io.write_json(path, report.to_dict())
