"""Scalar training objectives.  All batch reductions are arithmetic means."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

PROB_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights of the transition objective ``alpha*rep + beta*pred - gamma*domain``."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {v}")


def _vec(x):
    t = ad.tensor(x)
    if t.data.ndim != 1:
        t = ad.reshape(t, (t.data.size,))
    return t


def mse_loss(pred, target) -> Tensor:
    pred, target = _vec(pred), _vec(target)
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", pred.shape, target.shape)
    if pred.shape[0] == 0:
        raise ShapeError("mse_loss", pred.shape, detail="empty input")
    diff = pred - target
    return ad.mean(diff * diff)


def bce_loss(p, y) -> Tensor:
    """Binary cross-entropy on probabilities clamped to [1e-12, 1 - 1e-12]."""
    p, y = _vec(p), _vec(y)
    if p.shape != y.shape:
        raise ShapeError("bce_loss", p.shape, y.shape)
    if p.shape[0] == 0:
        raise ShapeError("bce_loss", p.shape, detail="empty input")
    pc = ad.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    ll = y * ad.log(pc) + (1.0 - y) * ad.log(1.0 - pc)
    return -ad.mean(ll)


def domain_ce_loss(logits, d) -> Tensor:
    """Mean cross-entropy of two-way domain logits (B, 2) against labels in {0, 1}."""
    logits = ad.tensor(logits)
    d = np.asarray(d).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[1] != 2 or logits.shape[0] != d.shape[0]:
        raise ShapeError("domain_ce_loss", logits.shape, d.shape)
    if logits.shape[0] == 0:
        raise ShapeError("domain_ce_loss", logits.shape, detail="empty batch")
    if not np.isin(d, (0, 1)).all():
        raise ValueError(f"domain labels must be 0 (source) or 1 (target), got {np.unique(d)}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(d.shape[0]), d.astype(int)] = 1.0
    return -ad.tsum(ad.log_softmax_rowwise(logits) * onehot) * (1.0 / d.shape[0])


def kl_rep_loss(s_teacher, s_transition) -> Tensor:
    """KL(softmax(teacher) || softmax(transition)), batch-averaged over rows.

    The teacher side is treated as a constant; Q is clamped below at 1e-12.
    """
    teacher = s_teacher.data if isinstance(s_teacher, Tensor) else np.asarray(s_teacher, dtype=np.float64)
    student = ad.tensor(s_transition)
    if teacher.shape != student.shape:
        raise ShapeError("kl_rep_loss", teacher.shape, student.shape)
    if teacher.ndim == 1:
        teacher = teacher[None, :]
        student = ad.reshape(student, (1, student.shape[0]))
    p = ad._softmax_np(teacher)
    with np.errstate(divide="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    q = ad.clip(ad.softmax_rowwise(student), PROB_EPS, None)
    cross = ad.tsum(ad.log(q) * p)
    return (float(plogp.sum()) - cross) * (1.0 / teacher.shape[0])


def transition_total(l_rep, l_pred, l_d, w: LossWeights = LossWeights()):
    """Reported value of ``alpha*l_rep + beta*l_pred - gamma*l_d``.

    Training does not backpropagate through this sum; the sign flip on the
    domain term is applied by the gradient-reversal node instead.
    """
    return w.alpha * l_rep + w.beta * l_pred - w.gamma * l_d


def target_total(p_outcome, y_outcome, los_pred, y_los) -> Tensor:
    return bce_loss(p_outcome, y_outcome) + mse_loss(los_pred, y_los)
