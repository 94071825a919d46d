"""Regression and ranking metrics."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.size != truth.size:
        raise DataError(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    if pred.size == 0:
        raise DataError("metrics need at least one sample")
    return pred, truth


def metric_mse_mad(pred, truth):
    """(mean squared error, mean absolute error)."""
    pred, truth = _pair(pred, truth)
    d = truth - pred
    return float(np.mean(d * d)), float(np.mean(np.abs(d)))


def metric_auroc(scores, labels) -> float:
    """Area under the ROC curve by a threshold sweep over distinct scores.

    Tied scores form one step of the curve, which contributes the trapezoid
    and therefore half credit for every tied positive/negative pair.
    """
    scores, labels = _pair(scores, labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise DataError("AUROC labels must be 0 or 1")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC undefined: labels contain a single class")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of each block of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    # trapezoids in integer counts, divided once at the end
    area = np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])) / 2.0
    return float(area / (n_pos * n_neg))
