"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

Every operation evaluates eagerly and, when any input requires a gradient,
records a :class:`TapeNode` holding its inputs and a backward rule.  Calling
:func:`backward` on a scalar output walks the recorded graph once in reverse
topological order and writes ``grad`` on every leaf that requires one.

Shape rules are deliberately narrow: elementwise ops need identical shapes,
except that a 1-D tensor may be added to the trailing axis of a larger one
(bias-row addition) and Python scalars combine with anything.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import BackwardError, NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "TapeNode",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "sigmoid",
    "tanh",
    "log",
    "clip",
    "concat",
    "take",
    "reshape",
    "tsum",
    "mean",
    "softmax_rowwise",
    "log_softmax_rowwise",
    "gradient_reverse",
    "gru_sequence",
    "backward",
    "grad",
    "no_grad",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording tape nodes (outputs never require grad)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Dense float64 tensor, optionally tracked for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node", "_backward_done")

    def __init__(self, data, requires_grad=False, _node=None, _checked=False):
        if not _checked:
            data = np.array(data, dtype=np.float64)
            if not np.isfinite(data).all():
                raise NonFiniteError("tensor: non-finite input values")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = _node
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def detach(self):
        return Tensor(self.data, _checked=True)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False):
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _is_scalar(x):
    return isinstance(x, (int, float, np.floating, np.integer))


def _make(data, op, inputs, backward_fn):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    node = TapeNode(op, tuple(inputs), backward_fn) if needs else None
    return Tensor(data, requires_grad=needs, _node=node, _checked=True)


def _bias_compatible(a, b):
    return b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[0]).sum(axis=0)


def _elementwise(op, a, b, fwd, da, db):
    if a.shape == b.shape:
        pass
    elif _bias_compatible(a, b) or _bias_compatible(b, a):
        pass
    else:
        raise ShapeError(op, a.shape, b.shape)
    out = fwd(a.data, b.data)

    def bw(g):
        ga = _reduce_to(da(g), a.shape) if a.requires_grad else None
        gb = _reduce_to(db(g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, op, (a, b), bw)


def add(a, b):
    if _is_scalar(b):
        a = _as_tensor(a)
        c = float(b)
        return _make(a.data + c, "add", (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    return _elementwise("add", a, b, np.add, lambda g: g, lambda g: g)


def sub(a, b):
    if _is_scalar(b):
        return add(a, -float(b))
    if _is_scalar(a):
        b = _as_tensor(b)
        c = float(a)
        return _make(c - b.data, "sub", (b,), lambda g: (-g,))
    a, b = _as_tensor(a), _as_tensor(b)
    return _elementwise("sub", a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a, b):
    if _is_scalar(b):
        a = _as_tensor(a)
        c = float(b)
        return _make(a.data * c, "mul", (a,), lambda g: (g * c,))
    if _is_scalar(a):
        return mul(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    return _elementwise("mul", a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data)


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def matmul(a, b):
    """2-D matrix product ``a @ b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, "matmul", (a, b), bw)


def sigmoid(a):
    a = _as_tensor(a)
    out = expit(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive input")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def clip(a, lo=None, hi=None):
    """Clamp values; the gradient is zero wherever the clamp engaged."""
    a = _as_tensor(a)
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    out = np.clip(a.data, lo_v, hi_v)
    inside = (a.data >= lo_v) & (a.data <= hi_v)
    return _make(out, "clip", (a,), lambda g: (np.where(inside, g, 0.0),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError("concat", ref, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        parts = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                parts.append(g[tuple(idx)])
            else:
                parts.append(None)
        return parts

    return _make(out, "concat", tensors, bw)


def take(a, indices, axis=0):
    """Select slices along ``axis`` (row-slice generalised to index lists)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis])):
        raise ShapeError("take", a.shape, idx.shape, detail="index out of range")
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _make(out, "take", (a,), bw)


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def tsum(a, axis=None):
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis), dtype=np.float64)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, "sum", (a,), bw)


def mean(a, axis=None):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def _softmax_np(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rowwise(a):
    """Softmax over the last axis, computed after subtracting the row max."""
    a = _as_tensor(a)
    if a.data.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("softmax", a.shape, detail="empty row")
    out = _softmax_np(a.data)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, "softmax", (a,), bw)


def log_softmax_rowwise(a):
    a = _as_tensor(a)
    if a.data.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("log_softmax", a.shape, detail="empty row")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    # the row max contributes exactly exp(0) = 1; log1p keeps tiny remainders
    e = np.exp(shifted)
    top = np.argmax(shifted, axis=-1)[..., None]
    np.put_along_axis(e, top, 0.0, axis=-1)
    lse = np.log1p(e.sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax", (a,), bw)


def gradient_reverse(x, lam):
    """Identity forward; multiplies the upstream gradient by ``-lam``."""
    if not np.isfinite(lam) or lam <= 0:
        raise ValueError(f"gradient_reverse: lambda must be finite and > 0, got {lam}")
    x = _as_tensor(x)
    lam = float(lam)
    return _make(x.data, "grad_reverse", (x,), lambda g: (-lam * g,))


def gru_sequence(x, mask, w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h):
    """Run N independent scalar-input GRU channels over a padded batch.

    x: (N, B, T) inputs; mask: (B, T) array of 0/1 marking real steps, padding
    only at the end.  Input weights and biases are (N, H), recurrent weights
    (N, H, H) used as ``h @ U``.  Per step::

        z = sigmoid(x w_z + h U_z + b_z)
        r = sigmoid(x w_r + h U_r + b_r)
        c = tanh(x w_h + (r * h) U_h + b_h)
        h = (1 - z) * h + z * c

    Padded steps carry the previous state through unchanged.  Returns the
    final states laid out as (B, N, H).
    """
    params = [_as_tensor(p) for p in (w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h)]
    x = _as_tensor(x)
    m = np.asarray(mask, dtype=np.float64)
    n, bsz, steps = x.shape
    hdim = params[0].shape[-1]
    for p in params[:3] + params[6:]:
        if p.shape != (n, hdim):
            raise ShapeError("gru_sequence", x.shape, p.shape)
    for p in params[3:6]:
        if p.shape != (n, hdim, hdim):
            raise ShapeError("gru_sequence", x.shape, p.shape)
    if m.shape != (bsz, steps):
        raise ShapeError("gru_sequence", x.shape, m.shape, detail="mask")
    if steps == 0:
        raise ShapeError("gru_sequence", x.shape, detail="empty sequence")
    wz, wr, wh, uz, ur, uh, bz, br, bh = (p.data for p in params)
    xd = x.data

    h = np.zeros((n, bsz, hdim))
    saved = []
    for t in range(steps):
        xt = xd[:, :, t, None]
        mt = m[None, :, t, None]
        z = expit(xt * wz[:, None, :] + h @ uz + bz[:, None, :])
        r = expit(xt * wr[:, None, :] + h @ ur + br[:, None, :])
        rh = r * h
        c = np.tanh(xt * wh[:, None, :] + rh @ uh + bh[:, None, :])
        h_new = h + z * (c - h)
        saved.append((h, z, r, rh, c))
        h = mt * h_new + (1.0 - mt) * h
    out = np.ascontiguousarray(h.transpose(1, 0, 2))

    def bw(g):
        dh = np.ascontiguousarray(g.transpose(1, 0, 2))
        gw = [np.zeros_like(wz), np.zeros_like(wr), np.zeros_like(wh)]
        gu = [np.zeros_like(uz), np.zeros_like(ur), np.zeros_like(uh)]
        gb = [np.zeros_like(bz), np.zeros_like(br), np.zeros_like(bh)]
        gx = np.zeros_like(xd) if x.requires_grad else None
        uz_t, ur_t, uh_t = (u.transpose(0, 2, 1) for u in (uz, ur, uh))
        for t in range(steps - 1, -1, -1):
            hp, z, r, rh, c = saved[t]
            xt = xd[:, :, t, None]
            mt = m[None, :, t, None]
            dnew = dh * mt
            dprev = dh * (1.0 - mt) + dnew * (1.0 - z)
            dc = dnew * z
            da_h = dc * (1.0 - c * c)
            da_z = dnew * (c - hp) * z * (1.0 - z)
            drh = da_h @ uh_t
            da_r = drh * hp * r * (1.0 - r)
            dprev += drh * r + da_z @ uz_t + da_r @ ur_t
            for k, (da, hin) in enumerate(((da_z, hp), (da_r, hp), (da_h, rh))):
                gw[k] += (da * xt).sum(axis=1)
                gb[k] += da.sum(axis=1)
                gu[k] += hin.transpose(0, 2, 1) @ da
            if gx is not None:
                gx[:, :, t] = (
                    da_z * wz[:, None, :] + da_r * wr[:, None, :] + da_h * wh[:, None, :]
                ).sum(axis=-1)
            dh = dprev
        return [gx] + gw + gu + gb

    return _make(out, "gru_sequence", [x] + params, bw)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(root):
    """Populate ``grad`` on every requires-grad leaf reachable from ``root``.

    Leaf grads are overwritten, not accumulated.  A second call on the same
    root raises :class:`BackwardError`.
    """
    if root.data.size != 1:
        raise BackwardError(f"backward: output must be scalar, got shape {root.shape}")
    if root._backward_done:
        raise BackwardError("backward: graph already differentiated")
    root._backward_done = True
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.data)}
    for t in reversed(_topological(root)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
            continue
        for inp, ig in zip(t.node.inputs, t.node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + ig if key in grads else ig


def grad(root, leaves):
    """Gradients of ``root`` with respect to ``leaves``; zeros for unreached leaves."""
    for leaf in leaves:
        leaf.grad = None
    backward(root)
    return [np.zeros_like(l.data) if l.grad is None else l.grad for l in leaves]
