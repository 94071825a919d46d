"""Domain classifier and the joint adversarial/distillation update of the transition stage.

The classifier minimises cross-entropy on the true domain labels.  Its input
passes through ``gradient_reverse(., gamma)`` so that, in the same backward
pass, the encoder receives ``-gamma`` times the domain gradient.  One
simultaneous update therefore descends ``alpha*L_rep + beta*L_pred`` and
ascends ``gamma*L_d`` for the encoder while the classifier descends ``L_d``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import McGruEncoder, MLPHead, _init_linear
from .errors import DataError, ShapeError
from .losses import LossWeights, bce_loss, domain_ce_loss, kl_rep_loss, mse_loss
from .models import LabelScaler, SourceModel, _encoder_from, _encoder_meta, _prefixed, _unprefix, \
    frozen_representation

SOURCE_DOMAIN = 0
TARGET_DOMAIN = 1


class DomainClassifier:
    """MLP: flattened shared embedding (M*H) -> hidden (tanh) -> 2 logits."""

    def __init__(self, params):
        self.params = {}
        for k in ("w1", "b1", "w2", "b2"):
            t = params[k] if isinstance(params[k], Tensor) else Tensor(params[k], requires_grad=True)
            t.requires_grad = True
            self.params[k] = t
        if self.params["w2"].shape[1] != 2:
            raise ShapeError("DomainClassifier", self.params["w2"].shape, (None, 2))

    @classmethod
    def init(cls, in_width, rng, hidden=32):
        w1, b1 = _init_linear(rng, max(in_width, 1), hidden)
        w1 = w1[:in_width]
        w2, b2 = _init_linear(rng, hidden, 2)
        return cls({"w1": w1, "b1": b1, "w2": w2, "b2": b2})

    @classmethod
    def zeros(cls, in_width, hidden=32):
        return cls({"w1": np.zeros((in_width, hidden)), "b1": np.zeros(hidden),
                    "w2": np.zeros((hidden, 2)), "b2": np.zeros(2)})

    @property
    def in_width(self):
        return self.params["w1"].shape[0]

    def __call__(self, flat: Tensor) -> Tensor:
        if flat.data.ndim != 2 or flat.shape[1] != self.in_width:
            raise ShapeError("DomainClassifier", flat.shape, (None, self.in_width))
        hid = ad.tanh(ad.matmul(flat, self.params["w1"]) + self.params["b1"])
        return ad.matmul(hid, self.params["w2"]) + self.params["b2"]

    def parameters(self):
        return list(self.params.values())

    def state_dict(self):
        return {k: t.data for k, t in self.params.items()}


def classify_domain(clf: DomainClassifier, F_sf) -> Tensor:
    """Domain logits (2,) for one shared-feature embedding matrix (M x H)."""
    F_sf = ad.tensor(F_sf)
    if F_sf.data.ndim != 2 or F_sf.data.size != clf.in_width:
        raise ShapeError("classify_domain", F_sf.shape, (clf.in_width,))
    return ad.reshape(clf(ad.reshape(F_sf, (1, F_sf.data.size))), (2,))


def domain_accuracy(logits, labels) -> float:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return float(np.mean(np.argmax(data, axis=1) == np.asarray(labels)))


class TransitionModel(SourceModel):
    """Source model extended with the domain classifier over shared channels."""

    kind = "transition"

    def __init__(self, encoder, head, classifier, shared, task="regression", scaler=LabelScaler()):
        super().__init__(encoder, head, task, scaler)
        self.shared = list(shared)
        self.shared_idx = np.array([encoder.index(f) for f in self.shared], dtype=np.intp)
        if classifier.in_width != len(self.shared) * encoder.hidden:
            raise ShapeError("TransitionModel", (classifier.in_width,), (len(self.shared) * encoder.hidden,))
        self.classifier = classifier

    @classmethod
    def init(cls, features, shared, hidden, rep, task, rng, scaler=LabelScaler()):
        enc = McGruEncoder.init(features, hidden, rep, rng)
        head = MLPHead.init(rep, rng)
        clf = DomainClassifier.init(len(shared) * hidden, rng)
        return cls(enc, head, clf, shared, task, scaler)

    def parameters(self):
        return super().parameters() + self.classifier.parameters()

    def state_dict(self):
        return {**super().state_dict(), **_prefixed("classifier", self.classifier.state_dict())}

    def meta(self):
        return {**super().meta(), "kind": self.kind, "shared": self.shared}

    @classmethod
    def from_checkpoint(cls, tensors, meta):
        return cls(_encoder_from(tensors, meta), MLPHead(_unprefix(tensors, "head")),
                   DomainClassifier(_unprefix(tensors, "classifier")), meta["shared"],
                   meta["task"], LabelScaler(*meta["scaler"]))


@dataclass
class TransitionBundle:
    teacher: SourceModel
    model: TransitionModel
    weights: LossWeights = LossWeights()

    def __post_init__(self):
        if self.teacher.encoder.features != self.model.encoder.features:
            raise DataError("teacher and transition encoders must cover the same source features")
        if self.teacher.encoder.rep != self.model.encoder.rep:
            raise ShapeError("TransitionBundle", (self.teacher.encoder.rep,), (self.model.encoder.rep,),
                             detail="teacher/transition representation width mismatch")


@dataclass
class Batch:
    """Padded inputs (n_channels, B, T), mask (B, T) and optional targets (B,)."""

    x: np.ndarray
    mask: np.ndarray
    y: np.ndarray | None = None

    @property
    def size(self):
        return self.mask.shape[0]


@dataclass
class StepResult:
    l_pred: float
    l_rep: float
    l_d: float
    domain_acc: float


def transition_losses(bundle: TransitionBundle, batch_src: Batch, batch_tar: Batch):
    """Build the step graph.  Returns (objective, l_pred, l_rep, l_d, logits, labels).

    ``objective`` is what backpropagation runs on; its domain term enters
    with a plus sign because the reversal node already flips the encoder side.
    """
    m, w = bundle.model, bundle.weights
    enc = m.encoder
    if batch_src.size == 0 or batch_tar.size == 0:
        raise DataError("adversarial step needs non-empty source and target batches")
    if batch_src.size != batch_tar.size:
        raise DataError(f"unbalanced domain batches: {batch_src.size} source vs {batch_tar.size} target")
    if batch_src.x.shape[0] != enc.n_channels:
        raise DataError("source batch channels do not match the transition encoder")
    if batch_tar.x.shape[0] != len(m.shared_idx):
        raise DataError("target batch must carry exactly the shared-feature channels")
    if batch_src.y is None:
        raise DataError("source batch has no labels")

    emb_src = enc.embed(batch_src.x, batch_src.mask)
    s_src = enc.project(emb_src)
    out = m.output(s_src)
    l_pred = bce_loss(out, batch_src.y) if m.task == "binary" else mse_loss(out, batch_src.y)
    objective = l_pred * w.beta if w.beta != 1.0 else l_pred

    s_teacher = frozen_representation(bundle.teacher.encoder, batch_src.x, batch_src.mask)
    l_rep = kl_rep_loss(s_teacher, s_src)
    if w.alpha > 0:
        objective = objective + l_rep * w.alpha

    l_d = logits = labels = None
    if len(m.shared_idx):
        f_src = ad.take(emb_src, m.shared_idx, axis=1)
        f_tar = enc.embed(batch_tar.x, batch_tar.mask, channels=m.shared_idx)
        both = ad.concat([f_src, f_tar], axis=0)
        flat = ad.reshape(both, (both.shape[0], both.shape[1] * both.shape[2]))
        flat = ad.gradient_reverse(flat, w.gamma) if w.gamma > 0 else flat.detach()
        logits = m.classifier(flat)
        labels = np.array([SOURCE_DOMAIN] * batch_src.size + [TARGET_DOMAIN] * batch_tar.size)
        l_d = domain_ce_loss(logits, labels)
        objective = objective + l_d
    return objective, l_pred, l_rep, l_d, logits, labels


def adversarial_step(bundle: TransitionBundle, batch_src: Batch, batch_tar: Batch, optimizer) -> StepResult:
    """One simultaneous update of encoder, source head and domain classifier."""
    objective, l_pred, l_rep, l_d, logits, labels = transition_losses(bundle, batch_src, batch_tar)
    optimizer.zero_grad()
    ad.backward(objective)
    optimizer.step()
    return StepResult(
        float(l_pred.data),
        float(l_rep.data),
        float(l_d.data) if l_d is not None else 0.0,
        domain_accuracy(logits, labels) if logits is not None else float("nan"),
    )
