"""Teacher -> transition -> target training with early stopping.

Each stage draws its randomness from ``numpy.random.default_rng([seed, stage,
...])`` so runs are bit-reproducible given the seed, configuration and data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .adversarial import Batch, TransitionBundle, TransitionModel, adversarial_step
from .data import Dataset, impute_and_normalize, make_batch
from .dtw import TransferMap, build_transfer_map, transfer_parameters
from .encoder import McGruEncoder, PredictionHeads
from .errors import ConfigError, DataError, DivergenceError, NonFiniteError
from .losses import LossWeights, bce_loss, kl_rep_loss, mse_loss, target_total, transition_total
from .metrics import metric_auroc, metric_mse_mad
from .models import LabelScaler, SourceModel, TargetModel, frozen_representation, snapshot
from .optim import Adam

log = logging.getLogger(__name__)

STAGES = ("teacher", "transition", "target")
_STAGE_CODE = {"split": 0, "teacher": 1, "transition": 2, "target": 3}


@dataclass(frozen=True)
class StageConfig:
    lr: float
    batch: int
    epochs: int
    patience: int


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 200
    patience: int = 10
    weights: LossWeights = LossWeights()
    hidden: int = 16
    rep: int = 32
    source_task: str = "regression"
    val_fraction: float = 0.2
    dtw_max_patients: int | None = 500
    dtw_max_len: int | None = None
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source_task not in ("regression", "binary"):
            raise ConfigError(f"source_task must be 'regression' or 'binary', got {self.source_task!r}")
        if self.hidden < 1 or self.rep < 1:
            raise ConfigError("hidden and rep sizes must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        for name in ("teacher", "transition", "target"):
            self.stage(name)
        unknown = set(self.overrides) - set(STAGES)
        if unknown:
            raise ConfigError(f"unknown stage override(s): {sorted(unknown)}")

    def stage(self, name) -> StageConfig:
        o = dict(self.overrides.get(name, {}))
        extra = set(o) - {"lr", "batch", "epochs", "patience"}
        if extra:
            raise ConfigError(f"stage {name!r}: unknown override(s) {sorted(extra)}")
        sc = StageConfig(float(o.get("lr", self.lr)), int(o.get("batch", self.batch)),
                         int(o.get("epochs", self.epochs)), int(o.get("patience", self.patience)))
        if not (sc.lr > 0 and sc.batch >= 1 and sc.epochs >= 0 and sc.patience >= 1):
            raise ConfigError(f"stage {name!r}: lr, batch and patience must be positive, epochs >= 0")
        if sc.epochs > 0 and sc.patience > sc.epochs:
            raise ConfigError(f"stage {name!r}: patience {sc.patience} exceeds max epochs {sc.epochs}")
        return sc

    def rng(self, stage, *extra):
        return np.random.default_rng([self.seed, _STAGE_CODE[stage], *extra])

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


def split_validation(ids, fraction, seed):
    """(train_ids, val_ids): the last ``fraction`` of a seeded shuffle is validation."""
    ids = list(ids)
    order = np.random.default_rng([seed, _STAGE_CODE["split"]]).permutation(len(ids))
    n_val = int(round(len(ids) * fraction))
    if len(ids) >= 2:
        n_val = min(max(n_val, 1), len(ids) - 1)
    else:
        n_val = 0
    shuffled = [ids[i] for i in order]
    return shuffled[: len(ids) - n_val], shuffled[len(ids) - n_val:]


def _indices(ds: Dataset, ids):
    pos = {pid: i for i, pid in enumerate(ds.ids)}
    return np.array([pos[i] for i in ids], dtype=np.intp)


class _EarlyStopper:
    def __init__(self, model, patience):
        self.model = model
        self.patience = patience
        self.best_val = np.inf
        self.best_epoch = 0
        self.best_state = snapshot(model)
        self.bad = 0

    def update(self, epoch, val):
        if val < self.best_val:
            self.best_val, self.best_epoch, self.bad = val, epoch, 0
            self.best_state = snapshot(self.model)
        else:
            self.bad += 1
        return self.bad >= self.patience

    def restore(self):
        self.model.load_state(self.best_state)


def _check(stage, epoch, value):
    if not np.isfinite(value):
        raise DivergenceError(stage, epoch, value)
    return value


def _batches(n, size, rng):
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _source_loss(model: SourceModel, x, lengths, y, idx):
    xb, mb = make_batch(x, lengths, idx)
    out = model.output(model.encoder.project(model.encoder.embed(xb, mb)))
    yb = y[idx]
    return bce_loss(out, yb) if model.task == "binary" else mse_loss(out, yb)


def _chunked_mean(fn, idx, size=256):
    total = 0.0
    for lo in range(0, len(idx), size):
        chunk = idx[lo:lo + size]
        total += fn(chunk) * len(chunk)
    return total / max(len(idx), 1)


@dataclass
class StageResult:
    model: object
    log: list
    best_epoch: int


def train_teacher(source: Dataset, cfg: RunConfig) -> StageResult:
    """Fit the teacher (encoder + single head) on the source task."""
    sc = cfg.stage("teacher")
    train_ids, val_ids = split_validation(source.ids, cfg.val_fraction, cfg.seed)
    tr, va = _indices(source, train_ids), _indices(source, val_ids)
    scaler = LabelScaler() if cfg.source_task == "binary" else LabelScaler.fit(source.los()[tr])
    model = SourceModel.init(source.features, cfg.hidden, cfg.rep, cfg.source_task, cfg.rng("teacher"), scaler)
    x, lengths = source.dense(model.encoder.features)
    y = model.labels(source)
    opt = Adam(model.parameters(), lr=sc.lr)
    rng = cfg.rng("teacher", 1)
    stopper = _EarlyStopper(model, sc.patience)
    rows = []
    for epoch in range(1, sc.epochs + 1):
        losses = []
        try:
            for idx in _batches(len(tr), sc.batch, rng):
                loss = _source_loss(model, x, lengths, y, tr[idx])
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                losses.append(float(loss.data) * len(idx))
            with ad.no_grad():
                val = _chunked_mean(lambda c: float(_source_loss(model, x, lengths, y, c).data), va) \
                    if len(va) else float("nan")
        except NonFiniteError:
            raise DivergenceError("teacher", epoch, float("nan")) from None
        train_loss = _check("teacher", epoch, sum(losses) / len(tr))
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val})
        log.debug("teacher epoch %d train %.5f val %.5f", epoch, train_loss, val)
        if stopper.update(epoch, val if len(va) else train_loss):
            break
    if sc.epochs > 0:
        stopper.restore()
    return StageResult(model, rows, stopper.best_epoch)


class _CyclingStream:
    """Endless stream of indices, reshuffled on every pass."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.buf = np.zeros(0, dtype=np.intp)

    def take(self, k):
        while self.buf.size < k:
            self.buf = np.concatenate([self.buf, self.rng.permutation(self.n)])
        out, self.buf = self.buf[:k], self.buf[k:]
        return out


def train_transition(teacher: SourceModel, source: Dataset, target: Dataset, cfg: RunConfig) -> StageResult:
    """Train the domain-invariant transition model.

    Target records are label-isolated before use; any label read raises.
    """
    target = target.hide_labels()
    sc = cfg.stage("transition")
    if teacher.encoder.features != source.features:
        raise DataError("teacher features do not match the source dataset")
    shared = [f for f in source.features if f in set(target.features)]
    model = TransitionModel.init(source.features, shared, teacher.encoder.hidden, teacher.encoder.rep,
                                 teacher.task, cfg.rng("transition"), teacher.scaler)
    bundle = TransitionBundle(teacher, model, cfg.weights)
    before = snapshot(teacher)

    train_ids, val_ids = split_validation(source.ids, cfg.val_fraction, cfg.seed)
    tr, va = _indices(source, train_ids), _indices(source, val_ids)
    xs, ls = source.dense(source.features)
    y = model.labels(source)
    xt, lt = target.dense(shared)
    opt = Adam(model.parameters(), lr=sc.lr)
    rng = cfg.rng("transition", 1)
    stream = _CyclingStream(len(target), cfg.rng("transition", 2))
    stopper = _EarlyStopper(model, sc.patience)
    w = cfg.weights

    def val_loss(chunk):
        xb, mb = make_batch(xs, ls, chunk)
        s_t = model.encoder.project(model.encoder.embed(xb, mb))
        out = model.output(s_t)
        l_pred = bce_loss(out, y[chunk]) if model.task == "binary" else mse_loss(out, y[chunk])
        l_rep = kl_rep_loss(frozen_representation(teacher.encoder, xb, mb), s_t)
        return w.alpha * float(l_rep.data) + w.beta * float(l_pred.data)

    rows = []
    for epoch in range(1, sc.epochs + 1):
        sums = np.zeros(5)
        try:
            for idx in _batches(len(tr), sc.batch, rng):
                src_idx = tr[idx]
                tar_idx = stream.take(len(src_idx))
                xb, mb = make_batch(xs, ls, src_idx)
                xtb, mtb = make_batch(xt, lt, tar_idx)
                res = adversarial_step(bundle, Batch(xb, mb, y[src_idx]), Batch(xtb, mtb), opt)
                total = transition_total(res.l_rep, res.l_pred, res.l_d, w)
                sums += len(idx) * np.array([total, res.l_pred, res.l_rep, res.l_d, res.domain_acc], dtype=float)
            with ad.no_grad():
                val = _chunked_mean(val_loss, va) if len(va) else float("nan")
        except NonFiniteError:
            raise DivergenceError("transition", epoch, float("nan")) from None
        avg = sums / len(tr)
        _check("transition", epoch, avg[0])
        rows.append({"epoch": epoch, "train_loss": float(avg[0]), "val_loss": val, "l_pred": float(avg[1]),
                     "l_rep": float(avg[2]), "l_d": float(avg[3]), "domain_acc": float(avg[4])})
        log.debug("transition epoch %d %s", epoch, rows[-1])
        if stopper.update(epoch, val if len(va) else avg[0]):
            break
    if sc.epochs > 0:
        stopper.restore()
    after = snapshot(teacher)
    assert all(np.array_equal(before[k], after[k]) for k in before), "teacher parameters changed"
    return StageResult(model, rows, stopper.best_epoch)


def init_target_from_transition(transition, target_features, tmap: TransferMap | None, cfg: RunConfig,
                                scratch=False) -> TargetModel:
    """Target model: transferred GRU channels (or random ones for the scratch ablation).

    Projection and heads are drawn from the same seeded stream either way, so
    the two variants differ only in their GRU channels.
    """
    rng = cfg.rng("target")
    enc = transition.encoder if hasattr(transition, "encoder") else transition
    hidden = enc.hidden if enc is not None else cfg.hidden
    rep = enc.rep if enc is not None else cfg.rep
    features = list(target_features)
    if scratch:
        encoder = McGruEncoder.init(features, hidden, rep, rng)
    else:
        if tmap is None:
            raise DataError("transfer requires a transfer map")
        encoder = transfer_parameters(enc, tmap, features, rng)
    return TargetModel(encoder, PredictionHeads.init(rep, rng))


def _target_losses(model: TargetModel, x, lengths, y_out, y_los, idx):
    xb, mb = make_batch(x, lengths, idx)
    p, los = model.forward(xb, mb)
    bce = bce_loss(p, y_out[idx])
    mse = mse_loss(los, y_los[idx])
    return bce + mse, los


def train_target(model: TargetModel, target: Dataset, cfg: RunConfig) -> StageResult:
    """Fine-tune every target parameter on BCE(outcome) + MSE(LOS).

    The log is the convergence curve: one row per epoch run with the training
    loss and the validation LOS MSE in original units.
    """
    sc = cfg.stage("target")
    train_ids, val_ids = split_validation(target.ids, cfg.val_fraction, cfg.seed)
    tr, va = _indices(target, train_ids), _indices(target, val_ids)
    model.los_scaler = LabelScaler.fit(target.los()[tr])
    x, lengths = target.dense(model.encoder.features)
    y_out = target.outcomes()
    y_los_raw = target.los()
    y_los = model.los_scaler.transform(y_los_raw)
    opt = Adam(model.parameters(), lr=sc.lr)
    rng = cfg.rng("target", 1)
    stopper = _EarlyStopper(model, sc.patience)
    rows = []
    for epoch in range(1, sc.epochs + 1):
        total = 0.0
        try:
            for idx in _batches(len(tr), sc.batch, rng):
                loss, _ = _target_losses(model, x, lengths, y_out, y_los, tr[idx])
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                total += float(loss.data) * len(idx)
            with ad.no_grad():
                if len(va):
                    vloss, vlos = _target_losses(model, x, lengths, y_out, y_los, va)
                    val_loss = float(vloss.data)
                    val_mse = float(np.mean((model.los_scaler.inverse(vlos.data) - y_los_raw[va]) ** 2))
                else:
                    val_loss = val_mse = float("nan")
        except NonFiniteError:
            raise DivergenceError("target", epoch, float("nan")) from None
        train_loss = _check("target", epoch, total / len(tr))
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_mse": val_mse, "val_loss": val_loss})
        if stopper.update(epoch, val_loss if len(va) else train_loss):
            break
    if sc.epochs > 0:
        stopper.restore()
    return StageResult(model, rows, stopper.best_epoch)


def target_training_loss(model: TargetModel, ds: Dataset) -> float:
    """Mean BCE + MSE of ``model`` over ``ds`` (LOS on the model's scaled axis)."""
    x, lengths = ds.dense(model.encoder.features)
    with ad.no_grad():
        p, los = model.forward(*make_batch(x, lengths, np.arange(len(ds))))
        return float(target_total(p, ds.outcomes(), los, model.los_scaler.transform(ds.los())).data)


@dataclass
class Experiment:
    """Artifacts and metrics of one teacher -> transition -> target run."""

    teacher: SourceModel
    transition: TransitionModel | None
    transfer_map: TransferMap | None
    target: TargetModel
    logs: dict
    metrics: dict
    scratch: TargetModel | None = None
    scratch_metrics: dict | None = None


def prepare(source_raw: Dataset, target_train_raw: Dataset, target_test_raw: Dataset | None = None):
    """Normalize source by itself and both target splits by target-train statistics."""
    src = impute_and_normalize(source_raw, source_raw)
    tar_tr = impute_and_normalize(target_train_raw, target_train_raw)
    tar_te = impute_and_normalize(target_test_raw, target_train_raw) if target_test_raw is not None else None
    return src, tar_tr, tar_te


def evaluate_target(model: TargetModel, ds: Dataset) -> dict:
    p, los = model.predict(ds)
    mse, mad = metric_mse_mad(los, ds.los())
    out = {"mse": mse, "mad": mad}
    try:
        out["auroc"] = metric_auroc(p, ds.outcomes())
    except DataError as e:
        log.warning("AUROC omitted: %s", e)
        out["auroc"] = None
    return out


def run_experiment(source: Dataset, target_train: Dataset, target_test: Dataset, cfg: RunConfig,
                   scratch=False, transfer=True, teacher: SourceModel | None = None) -> Experiment:
    """Run all three stages on normalized datasets.

    ``scratch`` additionally trains the target architecture from a random
    init; ``transfer=False`` skips stages 1-2 and the transferred model.
    """
    logs = {}
    transition = tmap = model = metrics = None
    if transfer:
        if teacher is None:
            res = train_teacher(source, cfg)
            teacher, logs["teacher"] = res.model, res.log
        res = train_transition(teacher, source, target_train, cfg)
        transition, logs["transition"] = res.model, res.log
        tmap = build_transfer_map(source, target_train, cfg.dtw_max_patients, cfg.dtw_max_len, cfg.seed)
        model = init_target_from_transition(transition, target_train.features, tmap, cfg)
        res = train_target(model, target_train, cfg)
        logs["target"] = res.log
        metrics = evaluate_target(model, target_test)
    exp = Experiment(teacher, transition, tmap, model, logs, metrics)
    if scratch:
        sm = init_target_from_transition(None, target_train.features, None, cfg, scratch=True)
        res = train_target(sm, target_train, cfg)
        logs["scratch"] = res.log
        exp.scratch, exp.scratch_metrics = sm, evaluate_target(sm, target_test)
    return exp
