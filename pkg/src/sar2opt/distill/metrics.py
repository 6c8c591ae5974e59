"""Multi-label average precision and F1."""

from __future__ import annotations

import logging

import numpy as np

from ..errors import ValidationError

log = logging.getLogger(__name__)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Step-wise area under the precision-recall curve.

    ``sum_n (R_n - R_{n-1}) P_n`` over the distinct score thresholds, tied
    scores forming a single threshold. Returns nan when there are no
    positives.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels, dtype=float).ravel()
    if labels.sum() == 0:
        return float("nan")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    thresholds = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[thresholds]
    fps = thresholds + 1 - tps
    precision = tps / (tps + fps)
    recall = tps / tps[-1]
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _f1(pred: np.ndarray, labels: np.ndarray) -> float:
    tp = float(np.sum(pred * labels))
    denom = float(np.sum(pred) + np.sum(labels))
    return 2 * tp / denom if denom > 0 else 1.0


def classification_metrics(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> dict[str, float]:
    """Macro/micro AP and F1 for ``N x C`` probabilities.

    Classes without positives are excluded from the macro averages.
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ValidationError("probs and labels must both be N x C")
    if np.any(probs < 0) or np.any(probs > 1):
        raise ValidationError("probabilities must lie in [0, 1]")
    pred = (probs >= threshold).astype(float)
    present = labels.sum(axis=0) > 0
    if not present.all():
        log.info("classes %s have no positives; excluded from macro averages", np.flatnonzero(~present).tolist())
    ap = [average_precision(probs[:, c], labels[:, c]) for c in np.flatnonzero(present)]
    f1 = [_f1(pred[:, c], labels[:, c]) for c in np.flatnonzero(present)]
    return {
        "ap_macro": float(np.mean(ap)) if ap else float("nan"),
        "ap_micro": average_precision(probs.ravel(), labels.ravel()),
        "f1_macro": float(np.mean(f1)) if f1 else float("nan"),
        "f1_micro": _f1(pred.ravel(), labels.ravel()),
    }
