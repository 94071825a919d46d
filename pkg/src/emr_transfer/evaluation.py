"""Patient-grouped cross-validation and report assembly."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, impute_and_normalize
from .errors import DataError, TransferError
from .metrics import metric_auroc, metric_mse_mad
from .pipeline import RunConfig, run_experiment, train_teacher

METRICS = ("mse", "mad", "auroc")

__all__ = ["FoldPlan", "kfold_split", "holdout_split", "run_cv", "CvResult", "summarize", "format_report",
           "epochs_to_reach", "metric_auroc", "metric_mse_mad"]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple
    seed: int

    def __post_init__(self):
        seen = set()
        for f in self.folds:
            if seen & set(f):
                raise AssertionError("patient assigned to more than one fold")
            seen |= set(f)
        sizes = [len(f) for f in self.folds]
        if sizes and max(sizes) - min(sizes) > 1:
            raise AssertionError("fold sizes differ by more than one")

    def patients(self):
        return [p for f in self.folds for p in f]

    def train_test(self, i):
        test = self.folds[i]
        train = [p for j, f in enumerate(self.folds) if j != i for p in f]
        return train, list(test)


def kfold_split(patient_ids, k=5, seed=0) -> FoldPlan:
    """Seeded shuffle, then round-robin assignment of patients to ``k`` folds."""
    ids = list(patient_ids)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate patient ids")
    if k < 1:
        raise DataError(f"k must be at least 1, got {k}")
    if len(ids) < k:
        raise DataError(f"{len(ids)} patients cannot fill {k} folds")
    order = np.random.default_rng([seed, 7]).permutation(len(ids))
    folds = [[] for _ in range(k)]
    for pos, i in enumerate(order):
        folds[pos % k].append(ids[i])
    return FoldPlan(k, tuple(tuple(f) for f in folds), seed)


def holdout_split(patient_ids, seed=0, test_fraction=0.2):
    """(train, test) for the degenerate k=1 case: last fraction of a seeded shuffle."""
    ids = list(patient_ids)
    if len(ids) < 2:
        raise DataError("holdout split needs at least 2 patients")
    order = np.random.default_rng([seed, 7]).permutation(len(ids))
    n_test = min(max(int(round(len(ids) * test_fraction)), 1), len(ids) - 1)
    shuffled = [ids[i] for i in order]
    return shuffled[: len(ids) - n_test], shuffled[len(ids) - n_test:]


def _fsum_mean(vals):
    return math.fsum(vals) / len(vals)


def summarize(fold_metrics):
    """Mean and population std per metric; folds without a value are skipped."""
    mean, std = {}, {}
    for m in METRICS:
        vals = sorted(f[m] for f in fold_metrics if f.get(m) is not None)
        if not vals:
            mean[m] = std[m] = None
            continue
        mu = _fsum_mean(vals)
        mean[m] = mu
        std[m] = math.sqrt(_fsum_mean([(v - mu) ** 2 for v in vals]))
    return mean, std


@dataclass
class CvResult:
    report: dict
    curves: dict
    models: dict


def _annotate(e, seed, fold):
    msg = e.args[0] if e.args else ""
    e.args = (f"seed {seed}, fold {fold}: {msg}",) + tuple(e.args[1:])
    e.fold = fold
    return e


def run_cv(source_raw: Dataset, target_raw: Dataset, cfg: RunConfig, k=5, seeds=(0,), scratch=False,
           transfer=True) -> CvResult:
    """Full three-stage pipeline on every (seed, fold); target folds are patient-grouped.

    The teacher depends only on the source cohort and the seed, so it is
    trained once per seed and reused across folds.
    """
    source = impute_and_normalize(source_raw, source_raw)
    folds, scratch_folds, curves, models = [], [], {}, {}
    for seed in seeds:
        run_cfg = cfg.with_seed(seed)
        if k == 1:
            splits = [holdout_split(target_raw.ids, seed)]
        else:
            plan = kfold_split(target_raw.ids, k, seed)
            assert len(set(plan.patients())) == len(target_raw), "fold plan lost patients"
            splits = [plan.train_test(i) for i in range(k)]
        teacher = train_teacher(source, run_cfg).model if transfer else None
        for i, (train_ids, test_ids) in enumerate(splits):
            assert not set(train_ids) & set(test_ids), "patient in both train and test fold"
            train_raw, test_raw = target_raw.subset(train_ids), target_raw.subset(test_ids)
            try:
                train = impute_and_normalize(train_raw, train_raw)
                test = impute_and_normalize(test_raw, train_raw)
                exp = run_experiment(source, train, test, run_cfg, scratch=scratch, transfer=transfer,
                                     teacher=teacher)
            except TransferError as e:
                raise _annotate(e, seed, i)
            tag = f"seed{seed}_fold{i}"
            models[tag] = exp
            if transfer:
                folds.append({"seed": seed, "fold": i, **exp.metrics})
                curves[tag] = exp.logs["target"]
            if scratch:
                scratch_folds.append({"seed": seed, "fold": i, **exp.scratch_metrics})
                curves[tag + "_scratch"] = exp.logs["scratch"]
    report = {}
    if transfer:
        mean, std = summarize(folds)
        report.update({"folds": folds, "mean": mean, "std": std})
    if scratch:
        mean, std = summarize(scratch_folds)
        report["scratch"] = {"folds": scratch_folds, "mean": mean, "std": std}
    return CvResult(report, curves, models)


def _row(title, section):
    parts = [title]
    for m in METRICS:
        mu, sd = section["mean"].get(m), section["std"].get(m)
        parts.append(f"  {m}: n/a" if mu is None else f"  {m}: {mu:.3f}({sd:.3f})")
    return "\n".join(parts)


def format_report(report: dict) -> str:
    """Human-readable ``metric: mean(std)`` table."""
    blocks = []
    if "folds" in report:
        blocks.append(_row(f"transfer ({len(report['folds'])} folds)", report))
    if "scratch" in report:
        blocks.append(_row(f"scratch ({len(report['scratch']['folds'])} folds)", report["scratch"]))
    return "\n".join(blocks) + "\n"


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def epochs_to_reach(curve, level):
    """First epoch whose validation MSE is at or below ``level``; None if never."""
    for row in curve:
        if row["val_mse"] <= level:
            return row["epoch"]
    return None


def best_val(curve):
    """(epoch, value) of the minimum validation MSE in a curve."""
    best = min(curve, key=lambda r: (r["val_mse"], r["epoch"]))
    return best["epoch"], best["val_mse"]
