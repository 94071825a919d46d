"""Longitudinal patient records, CSV ingestion, imputation and schema alignment.

CSV contract (UTF-8, long format):

* observations: ``patient_id,time_index,feature,value`` with one observation
  per row, ``time_index`` a non-negative integer;
* outcomes: ``patient_id,outcome,los`` with ``outcome`` in {0, 1} and
  ``los`` a non-negative decimal;
* schema declaration: JSON ``{"features": [...]}``.

Feature names are canonicalised (trimmed, case-folded) on load.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

STD_FLOOR = 1e-6


def canonical(name: str) -> str:
    return name.strip().casefold()


class LabelAccessError(DataError):
    """A stage that must not see labels tried to read one."""


class PatientRecord:
    """One admission: per-feature (time, value) sequences plus outcome labels.

    ``observations`` maps feature name to a pair of arrays (times, values)
    with strictly increasing integer times.  ``observed`` optionally maps a
    feature to a boolean mask separating measured entries from imputed ones.
    """

    def __init__(self, patient_id, observations, outcome=None, los=None, observed=None,
                 labels_hidden=False):
        self.patient_id = str(patient_id)
        self.observations = {}
        for name, (times, values) in observations.items():
            t = np.asarray(times, dtype=np.int64).reshape(-1)
            v = np.asarray(values, dtype=np.float64).reshape(-1)
            if t.shape != v.shape:
                raise DataError(f"patient {patient_id}, feature {name!r}: times/values length mismatch")
            if t.size > 1 and np.any(np.diff(t) <= 0):
                raise DataError(f"patient {patient_id}, feature {name!r}: time indices not strictly increasing")
            self.observations[name] = (t, v)
        if not any(t.size for t, _ in self.observations.values()):
            raise DataError(f"patient {patient_id} has no observations")
        self.observed = observed
        self._outcome = None if outcome is None else int(outcome)
        self._los = None if los is None else float(los)
        self.labels_hidden = labels_hidden

    @property
    def outcome(self):
        if self.labels_hidden:
            raise LabelAccessError(f"label access on label-isolated record {self.patient_id}")
        return self._outcome

    @property
    def los(self):
        if self.labels_hidden:
            raise LabelAccessError(f"label access on label-isolated record {self.patient_id}")
        return self._los

    def values(self, feature):
        return self.observations[feature][1] if feature in self.observations else np.zeros(0)

    def as_mapping(self):
        return {f: v for f, (_, v) in self.observations.items()}

    def time_grid(self):
        ts = [t for t, _ in self.observations.values() if t.size]
        return np.unique(np.concatenate(ts))

    def hide_labels(self):
        return PatientRecord(self.patient_id, self.observations, self._outcome, self._los,
                             self.observed, labels_hidden=True)

    def with_labels(self, outcome, los):
        return PatientRecord(self.patient_id, self.observations, outcome, los, self.observed)

    def __eq__(self, other):
        if not isinstance(other, PatientRecord):
            return NotImplemented
        if (self.patient_id, self._outcome, self._los) != (other.patient_id, other._outcome, other._los):
            return False
        if self.observations.keys() != other.observations.keys():
            return False
        return all(
            np.array_equal(t, other.observations[k][0]) and np.array_equal(v, other.observations[k][1])
            for k, (t, v) in self.observations.items()
        )

    def __repr__(self):
        return f"PatientRecord({self.patient_id!r}, features={len(self.observations)})"


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names with a shared/private role per feature."""

    features: tuple
    shared: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "shared", frozenset(self.shared))
        if len(set(self.features)) != len(self.features):
            raise DataError(f"duplicate features in schema: {self.features}")
        extra = self.shared - set(self.features)
        if extra:
            raise DataError(f"shared features not in schema: {sorted(extra)}")

    def role(self, name):
        if name not in self.features:
            raise DataError(f"feature {name!r} not in schema")
        return "shared" if name in self.shared else "private"

    @property
    def shared_features(self):
        return [f for f in self.features if f in self.shared]

    @property
    def private_features(self):
        return [f for f in self.features if f not in self.shared]

    @property
    def n_shared(self):
        return len(self.shared)

    @property
    def n_private(self):
        return len(self.features) - len(self.shared)

    def __len__(self):
        return len(self.features)


def _names(schema) -> list:
    if isinstance(schema, FeatureSchema):
        return list(schema.features)
    return [canonical(n) for n in schema]


def align_schemas(src, tar):
    """Split two feature lists into (shared, source-private, target-private).

    Shared keeps source order; each private list keeps its native order.
    """
    s, t = _names(src), _names(tar)
    tset, sset = set(t), set(s)
    shared = [f for f in s if f in tset]
    if not shared:
        warnings.warn("source and target schemas share no features", stacklevel=2)
    return shared, [f for f in s if f not in tset], [f for f in t if f not in sset]


def pair_schemas(src, tar):
    shared, _, _ = align_schemas(src, tar)
    return FeatureSchema(_names(src), shared), FeatureSchema(_names(tar), shared)


@dataclass
class Dataset:
    schema: FeatureSchema
    records: list
    stats: dict | None = None
    normalized: bool = False
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.patient_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate patient ids in dataset")
        self._dense_cache = {}

    @property
    def features(self):
        return list(self.schema.features)

    @property
    def ids(self):
        return [r.patient_id for r in self.records]

    def __len__(self):
        return len(self.records)

    def subset(self, ids: Iterable[str]) -> "Dataset":
        by_id = {r.patient_id: r for r in self.records}
        try:
            recs = [by_id[i] for i in ids]
        except KeyError as e:
            raise DataError(f"unknown patient id {e.args[0]!r}") from None
        return Dataset(self.schema, recs, self.stats, self.normalized, dict(self.report))

    def with_schema(self, schema: FeatureSchema) -> "Dataset":
        if list(schema.features) != self.features:
            raise DataError("schema feature list differs from dataset")
        return Dataset(schema, self.records, self.stats, self.normalized, dict(self.report))

    def hide_labels(self) -> "Dataset":
        return Dataset(self.schema, [r.hide_labels() for r in self.records], self.stats,
                       self.normalized, dict(self.report))

    def outcomes(self):
        return np.array([r.outcome for r in self.records], dtype=np.float64)

    def los(self):
        return np.array([r.los for r in self.records], dtype=np.float64)

    def dense(self, features: Sequence[str] | None = None):
        """(X, lengths): X has shape (n_features, n_patients, T_max), zero-padded."""
        if not self.normalized:
            raise DataError("dense(): dataset must be imputed and normalized first")
        feats = tuple(self.features if features is None else features)
        if feats in self._dense_cache:
            return self._dense_cache[feats]
        missing = [f for f in feats if f not in self.schema.features]
        if missing:
            raise DataError(f"dataset has no feature {missing[0]!r}")
        lengths = np.array([r.time_grid().size for r in self.records], dtype=np.int64)
        tmax = int(lengths.max()) if lengths.size else 0
        x = np.zeros((len(feats), len(self.records), tmax))
        for j, r in enumerate(self.records):
            for i, f in enumerate(feats):
                v = r.observations[f][1]
                x[i, j, : v.size] = v
        x.setflags(write=False)
        self._dense_cache[feats] = (x, lengths)
        return x, lengths


def make_batch(x, lengths, idx):
    """Slice patients ``idx`` out of a dense array; returns (x_batch, mask)."""
    idx = np.asarray(idx, dtype=np.intp)
    lens = lengths[idx]
    t = int(lens.max())
    xb = x[:, idx, :t]
    mask = (np.arange(t)[None, :] < lens[:, None]).astype(np.float64)
    return xb, mask


def _read_schema(schema) -> list:
    if isinstance(schema, FeatureSchema):
        return list(schema.features)
    if isinstance(schema, (list, tuple)):
        names = schema
    else:
        path = Path(schema)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"schema file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise DataError(f"schema file {path} is not valid JSON: {e}") from None
        if not isinstance(doc, dict) or not isinstance(doc.get("features"), list):
            raise DataError(f"schema file {path} must contain {{\"features\": [...]}}")
        names = doc["features"]
    out = [canonical(str(n)) for n in names]
    if len(set(out)) != len(out):
        raise DataError("schema declares duplicate feature names")
    return out


def _open_csv(path, header):
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    reader = csv.reader(fh)
    first = next(reader, None)
    if first is None or [c.strip() for c in first] != header:
        fh.close()
        raise DataError(f"{path}: expected header {','.join(header)}")
    return fh, reader


def load_csv(observations_path, outcomes_path, schema) -> Dataset:
    """Load a dataset from the observation/outcome CSV pair and a schema."""
    features = _read_schema(schema)
    fset = set(features)
    rows: dict[str, dict[str, dict[int, float]]] = {}
    fh, reader = _open_csv(observations_path, ["patient_id", "time_index", "feature", "value"])
    with fh:
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{observations_path}:{line}: expected 4 fields, got {len(row)}")
            pid, t_raw, feat, v_raw = row
            try:
                t = int(t_raw)
                v = float(v_raw)
            except ValueError:
                raise DataError(f"{observations_path}:{line}: malformed row {row!r}") from None
            if t < 0 or not np.isfinite(v):
                raise DataError(f"{observations_path}:{line}: malformed row {row!r}")
            feat = canonical(feat)
            if feat not in fset:
                raise DataError(f"{observations_path}:{line}: feature {feat!r} not in schema")
            per = rows.setdefault(pid, {}).setdefault(feat, {})
            if t in per:
                raise DataError(f"{observations_path}:{line}: duplicate observation ({pid}, {t}, {feat})")
            per[t] = v
    if not rows:
        raise DataError(f"{observations_path}: dataset is empty")

    labels = {}
    fh, reader = _open_csv(outcomes_path, ["patient_id", "outcome", "los"])
    with fh:
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{outcomes_path}:{line}: expected 3 fields, got {len(row)}")
            pid, o_raw, l_raw = row
            try:
                o = int(o_raw)
                los = float(l_raw)
            except ValueError:
                raise DataError(f"{outcomes_path}:{line}: malformed row {row!r}") from None
            if o not in (0, 1) or not np.isfinite(los) or los < 0:
                raise DataError(f"{outcomes_path}:{line}: malformed row {row!r}")
            if pid in labels:
                raise DataError(f"{outcomes_path}:{line}: duplicate outcome for patient {pid}")
            labels[pid] = (o, los)

    records = []
    for pid, feats in rows.items():
        if pid not in labels:
            raise DataError(f"{outcomes_path}: label missing for patient {pid}")
        obs = {}
        for f in features:
            if f in feats:
                ts = sorted(feats[f])
                obs[f] = (np.array(ts, dtype=np.int64), np.array([feats[f][t] for t in ts]))
        records.append(PatientRecord(pid, obs, *labels[pid]))
    return Dataset(FeatureSchema(features), records)


def _fmt(v: float) -> str:
    return repr(float(v))


def save_csv(ds: Dataset, observations_path, outcomes_path, schema_path=None):
    """Write a raw dataset in the CSV contract; floats use shortest round-trip repr."""
    with Path(observations_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "time_index", "feature", "value"])
        for r in ds.records:
            entries = []
            for f in ds.features:
                if f in r.observations:
                    t, v = r.observations[f]
                    mask = r.observed[f] if r.observed is not None else np.ones(t.size, bool)
                    entries.extend((int(ti), ds.features.index(f), f, vi) for ti, vi, m in zip(t, v, mask) if m)
            for ti, _, f, vi in sorted(entries):
                w.writerow([r.patient_id, ti, f, _fmt(vi)])
    with Path(outcomes_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "outcome", "los"])
        for r in ds.records:
            w.writerow([r.patient_id, r._outcome, _fmt(r._los)])
    if schema_path is not None:
        Path(schema_path).write_text(json.dumps({"features": ds.features}, indent=2) + "\n", encoding="utf-8")


def feature_stats(ds: Dataset) -> dict:
    """Per-feature (mean, std) over all observed values; std is population std."""
    stats = {}
    for f in ds.features:
        vals = [r.observations[f][1] for r in ds.records if f in r.observations]
        allv = np.concatenate(vals) if vals else np.zeros(0)
        if allv.size == 0:
            stats[f] = (float("nan"), float("nan"))
        else:
            stats[f] = (float(allv.mean()), float(allv.std()))
    return stats


def impute_and_normalize(ds: Dataset, stats_source: Dataset) -> Dataset:
    """Forward-fill per patient, fill leading gaps with the stats mean, then z-score.

    Statistics come from ``stats_source`` only (typically the training fold).
    Each output record has every schema feature on the patient's time grid
    (union of observation times) plus an ``observed`` mask.  Features with no
    observations in ``stats_source`` become all-zero and are listed under
    ``report["all_missing"]``.
    """
    if len(stats_source) == 0:
        raise DataError("impute_and_normalize: empty statistics source")
    if ds.normalized:
        raise DataError("impute_and_normalize: dataset already normalized")
    raw = feature_stats(stats_source)
    stats, all_missing = {}, []
    for f in ds.features:
        m, s = raw.get(f, (float("nan"), float("nan")))
        if not np.isfinite(m):
            all_missing.append(f)
            m, s = 0.0, 1.0
        stats[f] = (m, max(s, STD_FLOOR))
    records = []
    for r in ds.records:
        grid = r.time_grid()
        obs, observed = {}, {}
        for f in ds.features:
            mean, std = stats[f]
            dense = np.full(grid.size, np.nan)
            mask = np.zeros(grid.size, dtype=bool)
            if f in r.observations and f not in all_missing:
                t, v = r.observations[f]
                pos = np.searchsorted(grid, t)
                dense[pos] = v
                mask[pos] = True
            # forward fill
            idx = np.where(mask, np.arange(grid.size), -1)
            np.maximum.accumulate(idx, out=idx)
            filled = np.where(idx >= 0, dense[np.maximum(idx, 0)], mean)
            z = (filled - mean) / std
            if f in all_missing:
                z = np.zeros(grid.size)
            obs[f] = (grid, z)
            observed[f] = mask
        records.append(PatientRecord(r.patient_id, obs, r._outcome, r._los, observed, r.labels_hidden))
    report = dict(ds.report)
    report["all_missing"] = all_missing
    return Dataset(ds.schema, records, stats, True, report)
