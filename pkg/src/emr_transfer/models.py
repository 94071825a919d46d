"""Model containers for the three stages and their checkpoint (de)serialisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .data import Dataset, make_batch
from .encoder import GRU_KEYS, McGruEncoder, MLPHead, PredictionHeads
from .errors import CheckpointError, DataError

TASKS = ("regression", "binary")


@dataclass(frozen=True)
class LabelScaler:
    """Affine label standardisation; identity for binary tasks."""

    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, y):
        y = np.asarray(y, dtype=np.float64)
        return cls(float(y.mean()), float(max(y.std(), 1e-6)))

    def transform(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def inverse(self, y):
        return np.asarray(y, dtype=np.float64) * self.std + self.mean


def _frozen_params(encoder):
    return [Tensor(encoder.params[k].data, _checked=True) for k in GRU_KEYS]


def frozen_representation(encoder: McGruEncoder, x, mask) -> np.ndarray:
    """Representations (B, S) computed without recording any tape."""
    emb = ad.gru_sequence(x, mask, *_frozen_params(encoder)).data
    b = emb.shape[0]
    return emb.reshape(b, -1) @ encoder.params["proj_w"].data + encoder.params["proj_b"].data


def _prefixed(prefix, d):
    return {f"{prefix}.{k}": v for k, v in d.items()}


def _unprefix(tensors, prefix):
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def _encoder_meta(enc):
    return {"features": enc.features, "hidden": enc.hidden, "rep": enc.rep}


def _encoder_from(tensors, meta):
    try:
        return McGruEncoder(meta["features"], meta["hidden"], meta["rep"], _unprefix(tensors, "encoder"))
    except KeyError as e:
        raise CheckpointError(f"checkpoint missing {e.args[0]!r}") from None


class SourceModel:
    """Encoder plus a single prediction head (teacher or transition source task)."""

    kind = "source"

    def __init__(self, encoder: McGruEncoder, head: MLPHead, task="regression", scaler=LabelScaler()):
        if task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {task!r}")
        self.encoder = encoder
        self.head = head
        self.task = task
        self.scaler = scaler

    @classmethod
    def init(cls, features, hidden, rep, task, rng, scaler=LabelScaler()):
        enc = McGruEncoder.init(features, hidden, rep, rng)
        return cls(enc, MLPHead.init(rep, rng), task, scaler)

    def parameters(self):
        return self.encoder.parameters() + self.head.parameters()

    def output(self, s: Tensor) -> Tensor:
        raw = self.head(s)
        return ad.sigmoid(raw) if self.task == "binary" else raw

    def labels(self, ds: Dataset):
        """Training targets for ``ds`` on the model's (scaled) output scale."""
        if self.task == "binary":
            return ds.outcomes()
        return self.scaler.transform(ds.los())

    def state_dict(self):
        return {**_prefixed("encoder", self.encoder.state_dict()), **_prefixed("head", self.head.state_dict())}

    def meta(self):
        return {"kind": self.kind, "task": self.task, **_encoder_meta(self.encoder),
                "scaler": [self.scaler.mean, self.scaler.std]}

    def load_state(self, state):
        for t, v in zip(self.parameters(), [state[k] for k in self.state_dict()]):
            t.data = np.array(v, copy=True)

    @classmethod
    def from_checkpoint(cls, tensors, meta):
        head = MLPHead(_unprefix(tensors, "head"))
        return cls(_encoder_from(tensors, meta), head, meta["task"], LabelScaler(*meta["scaler"]))


class TargetModel:
    """Encoder with the outcome and LOS heads."""

    kind = "target"

    def __init__(self, encoder: McGruEncoder, heads: PredictionHeads, los_scaler=LabelScaler()):
        self.encoder = encoder
        self.heads = heads
        self.los_scaler = los_scaler

    def parameters(self):
        return self.encoder.parameters() + self.heads.parameters()

    def forward(self, x, mask):
        s = self.encoder.project(self.encoder.embed(x, mask))
        return self.heads.forward(s)

    def predict(self, ds: Dataset, batch=256):
        """(outcome probabilities, LOS in original units) for every record of ``ds``."""
        x, lengths = ds.dense(self.encoder.features)
        ps, ls = [], []
        with ad.no_grad():
            for lo in range(0, len(ds), batch):
                xb, mb = make_batch(x, lengths, np.arange(lo, min(lo + batch, len(ds))))
                p, los = self.forward(xb, mb)
                ps.append(p.data)
                ls.append(los.data)
        p = np.concatenate(ps) if ps else np.zeros(0)
        los = np.concatenate(ls) if ls else np.zeros(0)
        return p, self.los_scaler.inverse(los)

    def state_dict(self):
        return {**_prefixed("encoder", self.encoder.state_dict()),
                **_prefixed("outcome", self.heads.outcome.state_dict()),
                **_prefixed("los", self.heads.los.state_dict())}

    def meta(self):
        return {"kind": self.kind, **_encoder_meta(self.encoder),
                "los_scaler": [self.los_scaler.mean, self.los_scaler.std]}

    def load_state(self, state):
        for t, v in zip(self.parameters(), [state[k] for k in self.state_dict()]):
            t.data = np.array(v, copy=True)

    @classmethod
    def from_checkpoint(cls, tensors, meta):
        heads = PredictionHeads(MLPHead(_unprefix(tensors, "outcome")), MLPHead(_unprefix(tensors, "los")))
        return cls(_encoder_from(tensors, meta), heads, LabelScaler(*meta["los_scaler"]))


def snapshot(model):
    return {k: v.copy() for k, v in model.state_dict().items()}


def save_model(model, path):
    checkpoint.save(path, model.state_dict(), model.meta())


def load_model(path):
    tensors, meta = checkpoint.load(path)
    return model_from_checkpoint(tensors, meta)


def model_from_checkpoint(tensors, meta):
    kinds = {"source": SourceModel, "target": TargetModel}
    from .adversarial import TransitionModel

    kinds["transition"] = TransitionModel
    kind = meta.get("kind")
    if kind not in kinds:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    try:
        return kinds[kind].from_checkpoint(tensors, meta)
    except (KeyError, DataError, ValueError) as e:
        raise CheckpointError(f"checkpoint does not describe a valid {kind} model: {e}") from None
