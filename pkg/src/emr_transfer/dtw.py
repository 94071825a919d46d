"""DTW-based matching of target-private features to source GRU channels."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, FeatureSchema
from .encoder import McGruEncoder
from .errors import DataError


def dtw_distance(a: Sequence[float], b: Sequence[float]) -> float:
    """Full-window DTW with absolute-difference cost and unit step weights."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise DataError("dtw_distance: empty sequence")
    cost = np.abs(a[:, None] - b[None, :])
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev, c = acc[i], acc[i - 1], cost[i - 1]
        for j in range(1, m + 1):
            row[j] = c[j - 1] + min(prev[j], row[j - 1], prev[j - 1])
    return float(acc[n, m])


@dataclass(frozen=True)
class RepresentativeSeries:
    feature: str
    values: np.ndarray
    support: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.size == 0 or not np.isfinite(v).all():
            raise DataError(f"representative series for {self.feature!r} is empty or non-finite")
        object.__setattr__(self, "values", v)


def representative_series(dataset: Dataset, feature: str, max_patients=None, max_len=None,
                          seed: int = 0) -> RepresentativeSeries:
    """Per-time-step mean of the feature's z-scored sequences across patients.

    Only measured values count (imputed entries of a normalized dataset are
    skipped).  Time steps nobody observed are omitted; the result is capped
    at ``max_len`` steps.  ``max_patients`` subsamples contributors with
    ``seed``.
    """
    if feature not in dataset.features:
        raise DataError(f"feature {feature!r} not in dataset")
    seqs = []
    for r in dataset.records:
        if feature not in r.observations:
            continue
        t, v = r.observations[feature]
        if r.observed is not None:
            keep = r.observed[feature]
            t, v = t[keep], v[keep]
        if t.size:
            seqs.append((t, v))
    if not seqs:
        raise DataError(f"feature {feature!r} has no observations")
    if max_patients is not None and len(seqs) > max_patients:
        pick = np.sort(np.random.default_rng(seed).choice(len(seqs), size=max_patients, replace=False))
        seqs = [seqs[i] for i in pick]
    if not dataset.normalized:
        allv = np.concatenate([v for _, v in seqs])
        mean, std = allv.mean(), max(allv.std(), 1e-6)
        seqs = [(t, (v - mean) / std) for t, v in seqs]
    times = np.concatenate([t for t, _ in seqs])
    vals = np.concatenate([v for _, v in seqs])
    steps, inverse = np.unique(times, return_inverse=True)
    sums = np.bincount(inverse, weights=vals, minlength=steps.size)
    counts = np.bincount(inverse, minlength=steps.size)
    series = sums / counts
    if max_len is not None:
        series = series[:max_len]
    return RepresentativeSeries(feature, series, len(seqs))


@dataclass(frozen=True)
class TransferEntry:
    target_feature: str
    source_feature: str
    dtw_distance: float
    tag: str


def match_private_features(target_privates: Sequence[RepresentativeSeries],
                           source_features: Sequence[RepresentativeSeries]) -> list:
    """Map each target-private series to its DTW-nearest source series.

    Ties go to the earliest source feature.
    """
    if not source_features:
        raise DataError("match_private_features: empty source feature list")
    out = []
    for tp in target_privates:
        dists = [dtw_distance(tp.values, sf.values) for sf in source_features]
        best = int(np.argmin(dists))
        out.append(TransferEntry(tp.feature, source_features[best].feature, dists[best], "private"))
    return out


class TransferMap:
    """Total map from target features to the source channels they inherit."""

    HEADER = ["target_feature", "source_feature", "dtw_distance", "tag"]

    def __init__(self, entries, target_features=None):
        entries = list(entries)
        order = list(target_features) if target_features is not None else [e.target_feature for e in entries]
        by_target = {}
        for e in entries:
            if e.target_feature in by_target:
                raise DataError(f"transfer map lists {e.target_feature!r} twice")
            if e.tag not in ("shared", "private"):
                raise DataError(f"transfer map: bad tag {e.tag!r}")
            if e.tag == "shared" and e.source_feature != e.target_feature:
                raise DataError(f"shared feature {e.target_feature!r} must map to its namesake")
            by_target[e.target_feature] = e
        missing = [f for f in order if f not in by_target]
        if missing:
            raise DataError(f"transfer map has no entry for target feature {missing[0]!r}")
        extra = set(by_target) - set(order)
        if extra:
            raise DataError(f"transfer map has entries for unknown features {sorted(extra)}")
        self.entries = [by_target[f] for f in order]

    def __getitem__(self, target_feature):
        for e in self.entries:
            if e.target_feature == target_feature:
                return e
        raise KeyError(target_feature)

    def as_dict(self):
        return {e.target_feature: e.source_feature for e in self.entries}

    def __eq__(self, other):
        return isinstance(other, TransferMap) and self.entries == other.entries

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for e in self.entries:
            w.writerow([e.target_feature, e.source_feature, repr(float(e.dtw_distance)), e.tag])
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise DataError(f"transfer map not found: {path}") from None
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != cls.HEADER:
            raise DataError(f"{path}: expected header {','.join(cls.HEADER)}")
        entries = []
        for line, row in enumerate(rows[1:], start=2):
            if len(row) != 4:
                raise DataError(f"{path}:{line}: malformed row")
            try:
                entries.append(TransferEntry(row[0], row[1], float(row[2]), row[3]))
            except ValueError:
                raise DataError(f"{path}:{line}: malformed distance {row[2]!r}") from None
        return cls(entries)


def build_transfer_map(source: Dataset, target: Dataset, max_patients=None, max_len=None,
                       seed: int = 0) -> TransferMap:
    """Shared features map to their namesakes; privates go to the DTW-nearest source feature."""
    src_names, tar_names = set(source.features), target.features
    src_reps = {f: representative_series(source, f, max_patients, max_len, seed) for f in source.features}
    entries = []
    privates = []
    for f in tar_names:
        if f in src_names:
            tar_rep = representative_series(target, f, max_patients, max_len, seed)
            entries.append(TransferEntry(f, f, dtw_distance(tar_rep.values, src_reps[f].values), "shared"))
        else:
            privates.append(representative_series(target, f, max_patients, max_len, seed))
    if privates:
        entries.extend(match_private_features(privates, [src_reps[f] for f in source.features]))
    return TransferMap(entries, tar_names)


def transfer_parameters(transition: McGruEncoder, tmap: TransferMap, target_schema,
                        rng=None) -> McGruEncoder:
    """Fresh target encoder whose channels are deep copies of mapped transition channels.

    The projection is newly initialised from ``rng``; source and target
    projection widths differ in general.
    """
    features = list(target_schema.features) if isinstance(target_schema, FeatureSchema) else list(target_schema)
    mapping = tmap.as_dict()
    for f in features:
        if f not in mapping:
            raise DataError(f"transfer map does not cover target feature {f!r}")
        if mapping[f] not in transition.features:
            raise DataError(f"transition encoder has no channel {mapping[f]!r} (mapped from {f!r})")
    rng = np.random.default_rng(0) if rng is None else rng
    target = McGruEncoder.init(features, transition.hidden, transition.rep, rng)
    for i, f in enumerate(features):
        target.set_channel(i, transition.channel(mapping[f]))
    return target
