"""Multi-channel GRU encoder: one scalar-input GRU per medical feature.

Two evaluation paths exist.  The single-record functions (``gru_step``,
``encode_channel``, ``build_embedding_matrix``, ``project_health``,
``predict``) are written with primitive autodiff ops and serve as the
readable reference.  Training uses :meth:`McGruEncoder.embed`, which runs all
channels over a padded batch through the fused ``gru_sequence`` op.  Tests
hold the two paths equal.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, NonFiniteError, ShapeError

GRU_KEYS = ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h")


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class GruChannelParams:
    """Weights of one univariate GRU channel.

    Input weights ``w_*`` and biases ``b_*`` have length H; recurrent weights
    ``u_*`` are H x H and act on the row vector ``h @ u``.
    """

    w_z: np.ndarray
    w_r: np.ndarray
    w_h: np.ndarray
    u_z: np.ndarray
    u_r: np.ndarray
    u_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        h = _arr(self.w_z).shape[0]
        for f in fields(self):
            want = (h, h) if f.name.startswith("u_") else (h,)
            got = _arr(getattr(self, f.name)).shape
            if got != want:
                raise ShapeError("GruChannelParams", want, got, detail=f.name)

    @property
    def hidden(self):
        return _arr(self.w_z).shape[0]

    @classmethod
    def zeros(cls, hidden):
        return cls(**{k: np.zeros((hidden, hidden) if k.startswith("u_") else hidden) for k in GRU_KEYS})

    @classmethod
    def random(cls, hidden, rng, scale=None):
        bound = 1.0 / np.sqrt(hidden) if scale is None else scale
        kw = {}
        for k in GRU_KEYS:
            shape = (hidden, hidden) if k.startswith("u_") else (hidden,)
            kw[k] = rng.uniform(-bound, bound, size=shape)
        return cls(**kw)

    def copy(self):
        return GruChannelParams(**{k: np.array(_arr(getattr(self, k)), copy=True) for k in GRU_KEYS})

    def as_tensors(self, requires_grad=True):
        return GruChannelParams(**{k: Tensor(_arr(getattr(self, k)), requires_grad) for k in GRU_KEYS})

    def to_dict(self):
        return {k: np.array(_arr(getattr(self, k)), copy=True) for k in GRU_KEYS}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.array(d[k], dtype=np.float64, copy=True) for k in GRU_KEYS})


def gru_step(params: GruChannelParams, h_prev, x_t) -> Tensor:
    """One recurrence step: ``h = (1 - z) * h_prev + z * candidate``."""
    hdim = params.hidden
    h_prev = ad.tensor(h_prev)
    if h_prev.shape != (hdim,):
        raise ShapeError("gru_step", h_prev.shape, (hdim,))
    x = float(x_t)
    if not np.isfinite(x):
        raise NonFiniteError("gru_step: non-finite input")
    p = {k: ad.tensor(getattr(params, k)) for k in GRU_KEYS}
    h = ad.reshape(h_prev, (1, hdim))

    def gate(w, u, b, state):
        return ad.reshape(ad.mul(w, x), (1, hdim)) + ad.matmul(state, u) + b

    z = ad.sigmoid(gate(p["w_z"], p["u_z"], p["b_z"], h))
    r = ad.sigmoid(gate(p["w_r"], p["u_r"], p["b_r"], h))
    c = ad.tanh(gate(p["w_h"], p["u_h"], p["b_h"], r * h))
    h_new = h + z * (c - h)
    return ad.reshape(h_new, (hdim,))


def encode_channel(params: GruChannelParams, seq: Sequence[float]) -> Tensor:
    seq = np.asarray(seq, dtype=np.float64).reshape(-1)
    if seq.size == 0:
        raise DataError("encode_channel: empty sequence")
    h = Tensor(np.zeros(params.hidden))
    for x in seq:
        h = gru_step(params, h, x)
    return h


def _init_linear(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


class McGruEncoder:
    """Stacked per-feature GRU channels followed by the affine projection.

    ``params`` holds channel-stacked arrays (leading axis = channel) for the
    nine GRU weights plus ``proj_w`` ((N*H) x S) and ``proj_b`` (S,).
    """

    def __init__(self, features, hidden, rep, params):
        features = list(features)
        if len(set(features)) != len(features):
            raise DataError(f"duplicate feature names in encoder: {features}")
        self.features = features
        self.hidden = int(hidden)
        self.rep = int(rep)
        n, h = len(features), self.hidden
        expected = {k: (n, h, h) if k.startswith("u_") else (n, h) for k in GRU_KEYS}
        expected.update(proj_w=(n * h, self.rep), proj_b=(self.rep,))
        self.params = {}
        for k, shape in expected.items():
            t = params[k] if isinstance(params[k], Tensor) else Tensor(params[k], requires_grad=True)
            if t.shape != shape:
                raise ShapeError("McGruEncoder", shape, t.shape, detail=k)
            t.requires_grad = True
            self.params[k] = t
        self._index = {f: i for i, f in enumerate(features)}

    @classmethod
    def init(cls, features, hidden=16, rep=32, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        features = list(features)
        chans = [GruChannelParams.random(hidden, rng) for _ in features]
        params = {k: np.stack([getattr(c, k) for c in chans]) if chans else
                  np.zeros((0, hidden, hidden) if k.startswith("u_") else (0, hidden))
                  for k in GRU_KEYS}
        for k in ("b_z", "b_r", "b_h"):
            params[k] = np.zeros_like(params[k])
        params["proj_w"], params["proj_b"] = _init_linear(rng, len(features) * hidden, rep)
        return cls(features, hidden, rep, params)

    @classmethod
    def zeros(cls, features, hidden, rep):
        n = len(features)
        params = {k: np.zeros((n, hidden, hidden) if k.startswith("u_") else (n, hidden)) for k in GRU_KEYS}
        params["proj_w"] = np.zeros((n * hidden, rep))
        params["proj_b"] = np.zeros(rep)
        return cls(features, hidden, rep, params)

    @property
    def n_channels(self):
        return len(self.features)

    def index(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"encoder has no channel for feature {name!r}") from None

    def channel(self, key) -> GruChannelParams:
        i = key if isinstance(key, (int, np.integer)) else self.index(key)
        return GruChannelParams(**{k: self.params[k].data[i].copy() for k in GRU_KEYS})

    def set_channel(self, key, chan: GruChannelParams):
        i = key if isinstance(key, (int, np.integer)) else self.index(key)
        if chan.hidden != self.hidden:
            raise ShapeError("set_channel", (self.hidden,), (chan.hidden,))
        for k in GRU_KEYS:
            self.params[k].data[i] = _arr(getattr(chan, k))

    def parameters(self):
        return list(self.params.values())

    def state_dict(self):
        return {k: t.data for k, t in self.params.items()}

    def copy(self):
        return McGruEncoder(self.features, self.hidden, self.rep,
                            {k: t.data.copy() for k, t in self.params.items()})

    def embed(self, x, mask, channels=None) -> Tensor:
        """Batched embeddings (B, n, H) for inputs x of shape (n, B, T).

        ``channels`` selects a subset of this encoder's channels (by index);
        x must then carry exactly those channels in that order.
        """
        p = [self.params[k] for k in GRU_KEYS]
        if channels is not None:
            p = [ad.take(t, channels, axis=0) for t in p]
        return ad.gru_sequence(Tensor(x), mask, *p)

    def project(self, emb: Tensor) -> Tensor:
        b, n, h = emb.shape
        if n * h != self.params["proj_w"].shape[0]:
            raise ShapeError("project", emb.shape, self.params["proj_w"].shape)
        flat = ad.reshape(emb, (b, n * h))
        return ad.matmul(flat, self.params["proj_w"]) + self.params["proj_b"]


def build_embedding_matrix(encoder: McGruEncoder, x: Mapping[str, Sequence[float]]) -> np.ndarray:
    """Embedding matrix F (N x H); row i encodes feature ``encoder.features[i]``."""
    rows = []
    for i, name in enumerate(encoder.features):
        if name not in x:
            raise DataError(f"record is missing feature {name!r}")
        rows.append(encode_channel(encoder.channel(i), x[name]).data)
    return np.stack(rows) if rows else np.zeros((0, encoder.hidden))


def project_health(encoder: McGruEncoder, F) -> Tensor:
    """Health representation ``s = flatten(F) @ W1 + b1`` for one record."""
    F = ad.tensor(F)
    if F.shape != (encoder.n_channels, encoder.hidden):
        raise ShapeError("project_health", F.shape, (encoder.n_channels, encoder.hidden))
    flat = ad.reshape(F, (1, encoder.n_channels * encoder.hidden))
    s = ad.matmul(flat, encoder.params["proj_w"]) + encoder.params["proj_b"]
    return ad.reshape(s, (encoder.rep,))


class MLPHead:
    """Two-layer head S -> S/2 (tanh) -> 1 producing a raw scalar per row."""

    def __init__(self, params):
        self.params = {}
        for k in ("w1", "b1", "w2", "b2"):
            t = params[k] if isinstance(params[k], Tensor) else Tensor(params[k], requires_grad=True)
            t.requires_grad = True
            self.params[k] = t
        s, half = self.params["w1"].shape
        if self.params["b1"].shape != (half,) or self.params["w2"].shape != (half, 1) \
                or self.params["b2"].shape != (1,):
            raise ShapeError("MLPHead", (s, half), self.params["w2"].shape)

    @classmethod
    def init(cls, rep, rng):
        half = max(1, rep // 2)
        w1, b1 = _init_linear(rng, rep, half)
        w2, b2 = _init_linear(rng, half, 1)
        return cls({"w1": w1, "b1": b1, "w2": w2, "b2": b2})

    @classmethod
    def zeros(cls, rep):
        half = max(1, rep // 2)
        return cls({"w1": np.zeros((rep, half)), "b1": np.zeros(half),
                    "w2": np.zeros((half, 1)), "b2": np.zeros(1)})

    def __call__(self, s: Tensor) -> Tensor:
        """Raw outputs (B,) for representations of shape (B, S)."""
        hid = ad.tanh(ad.matmul(s, self.params["w1"]) + self.params["b1"])
        out = ad.matmul(hid, self.params["w2"]) + self.params["b2"]
        return ad.reshape(out, (s.shape[0],))

    def parameters(self):
        return list(self.params.values())

    def state_dict(self):
        return {k: t.data for k, t in self.params.items()}


class PredictionHeads:
    """Outcome head (sigmoid output) and LOS head (identity output)."""

    def __init__(self, outcome: MLPHead, los: MLPHead):
        self.outcome = outcome
        self.los = los

    @classmethod
    def init(cls, rep, rng):
        return cls(MLPHead.init(rep, rng), MLPHead.init(rep, rng))

    @classmethod
    def zeros(cls, rep):
        return cls(MLPHead.zeros(rep), MLPHead.zeros(rep))

    def forward(self, s: Tensor):
        """Batched (p_outcome (B,), los (B,)) for s of shape (B, S)."""
        return ad.sigmoid(self.outcome(s)), self.los(s)

    def parameters(self):
        return self.outcome.parameters() + self.los.parameters()


def predict(heads: PredictionHeads, s):
    """Single-record prediction: (outcome probability, LOS)."""
    s = ad.tensor(s)
    if s.data.ndim != 1:
        raise ShapeError("predict", s.shape, detail="expected a vector")
    p, los = heads.forward(ad.reshape(s, (1, s.shape[0])))
    return float(p.data[0]), float(los.data[0])
