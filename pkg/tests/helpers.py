"""Small dataset builders shared by several test modules."""

import numpy as np

from emr_transfer.data import Dataset, FeatureSchema, PatientRecord


def make_dataset(series, labels=None, features=None):
    """Raw dataset from ``{patient_id: {feature: values}}`` observed at steps 0..len-1."""
    features = features or sorted({f for rec in series.values() for f in rec})
    recs = []
    for i, (pid, obs) in enumerate(series.items()):
        outcome, los = labels[pid] if labels else (i % 2, float(i))
        recs.append(PatientRecord(pid, {f: (np.arange(len(v)), np.asarray(v, float)) for f, v in obs.items()},
                                  outcome, los))
    return Dataset(FeatureSchema(features), recs)


def random_dataset(rng, n, features, t_max=5, prefix="p"):
    series = {}
    for i in range(n):
        t = int(rng.integers(1, t_max + 1))
        series[f"{prefix}{i}"] = {f: rng.normal(size=t).tolist() for f in features}
    labels = {pid: (int(rng.integers(0, 2)), float(rng.uniform(0, 10))) for pid in series}
    return make_dataset(series, labels, list(features))


def permute_labels(ds, rng):
    """Copy of ``ds`` whose (outcome, LOS) pairs are shuffled across patients."""
    perm = rng.permutation(len(ds))
    recs = [r.with_labels(ds.records[j]._outcome, ds.records[j]._los) for r, j in zip(ds.records, perm)]
    return Dataset(ds.schema, recs, ds.stats, ds.normalized, dict(ds.report))
