"""Seeded generator of paired source/target cohorts with misaligned features.

Every patient follows a latent AR(1) path ``z_t = mu + rho (z_{t-1} - mu) + eps``
that starts near the origin and drifts toward a patient-specific attractor
``mu`` (a severity scale times a fixed direction).  Features are noisy linear
readouts of ``z_t``; shared features use the same loadings in both cohorts
with a per-domain affine distortion whose size is ``shift``.  Labels depend on
the latent path and the latent stream only:

* outcome = 1 when the terminal latent norm exceeds ``outcome_threshold``;
* LOS = ``los_base + los_scale * t*`` plus noise, with ``t*`` the first step
  whose latent norm exceeds ``los_threshold`` (the stay length if never).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset, FeatureSchema, PatientRecord
from .errors import ConfigError


@dataclass(frozen=True)
class GeneratorConfig:
    n_source: int = 2000
    n_target: int = 264
    n_shared: int = 8
    n_source_private: int = 4
    n_target_private: int = 4
    t_min: int = 6
    t_max: int = 16
    latent_dim: int = 3
    ar_coef: float = 0.8
    latent_noise: float = 0.25
    start_scale: float = 0.3
    severity_range: tuple = (0.2, 2.0)
    obs_noise: float = 0.3
    missing_rate: float = 0.15
    shift: float = 1.0
    private_similarity: float = 0.9
    outcome_threshold: float = 1.2
    los_threshold: float = 0.9
    los_base: float = 2.0
    los_scale: float = 1.5
    los_noise: float = 1.0
    outcome_band: tuple = (0.2, 0.6)
    noise_seed: int | None = None

    def __post_init__(self):
        counts = dict(n_source=self.n_source, n_target=self.n_target, latent_dim=self.latent_dim)
        for k, v in counts.items():
            if int(v) != v or v < 1:
                raise ConfigError(f"generator: {k} must be a positive integer, got {v}")
        for k in ("n_shared", "n_source_private", "n_target_private"):
            v = getattr(self, k)
            if int(v) != v or v < 0:
                raise ConfigError(f"generator: {k} must be a non-negative integer, got {v}")
        if self.n_shared + self.n_source_private == 0 or self.n_shared + self.n_target_private == 0:
            raise ConfigError("generator: each cohort needs at least one feature")
        if not 1 <= self.t_min <= self.t_max:
            raise ConfigError(f"generator: need 1 <= t_min <= t_max, got {self.t_min}, {self.t_max}")
        if not 0 <= self.missing_rate < 1:
            raise ConfigError("generator: missing_rate must lie in [0, 1)")
        if self.shift < 0 or self.obs_noise < 0 or self.latent_noise < 0:
            raise ConfigError("generator: shift and noise scales must be non-negative")
        if not 0 <= self.private_similarity <= 1:
            raise ConfigError("generator: private_similarity must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("outcome_band", "severity_range"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"generator config: {e}") from None

    def to_dict(self):
        d = asdict(self)
        d["outcome_band"] = list(self.outcome_band)
        d["severity_range"] = list(self.severity_range)
        return d


def feature_names(cfg: GeneratorConfig):
    shared = [f"shared_{i:02d}" for i in range(cfg.n_shared)]
    src_priv = [f"src_priv_{i:02d}" for i in range(cfg.n_source_private)]
    tar_priv = [f"tar_priv_{i:02d}" for i in range(cfg.n_target_private)]
    return shared, src_priv, tar_priv


def _unit_rows(rng, n, d):
    a = rng.normal(size=(n, d))
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def _latent_cohort(cfg, rng, n):
    """Latent paths, stay lengths and labels for ``n`` patients."""
    direction = np.ones(cfg.latent_dim) / np.sqrt(cfg.latent_dim)
    paths, labels = [], []
    for _ in range(n):
        steps = int(rng.integers(cfg.t_min, cfg.t_max + 1))
        mu = rng.uniform(*cfg.severity_range) * direction
        z = np.empty((steps, cfg.latent_dim))
        z[0] = rng.normal(scale=cfg.start_scale, size=cfg.latent_dim)
        for t in range(1, steps):
            z[t] = mu + cfg.ar_coef * (z[t - 1] - mu) + rng.normal(scale=cfg.latent_noise, size=cfg.latent_dim)
        norms = np.linalg.norm(z, axis=1)
        outcome = int(norms[-1] > cfg.outcome_threshold)
        above = np.nonzero(norms > cfg.los_threshold)[0]
        t_star = int(above[0]) if above.size else steps
        los = max(0.0, cfg.los_base + cfg.los_scale * t_star + rng.normal(scale=cfg.los_noise))
        paths.append(z)
        labels.append((outcome, los))
    return paths, labels


def _observe(paths, labels, prefix, names, loadings, scale, offset, cfg, rng):
    records = []
    for p, (z, (outcome, los)) in enumerate(zip(paths, labels)):
        steps = z.shape[0]
        clean = z @ loadings.T * scale + offset
        noisy = clean + rng.normal(scale=cfg.obs_noise, size=clean.shape)
        keep = rng.random(size=clean.shape) >= cfg.missing_rate
        if not keep.any():
            keep[0, 0] = True
        obs = {}
        for j, name in enumerate(names):
            t = np.nonzero(keep[:, j])[0]
            if t.size:
                obs[name] = (t, noisy[t, j])
        records.append(PatientRecord(f"{prefix}{p:05d}", obs, outcome, los))
    return records


def synth_generate(cfg: GeneratorConfig = GeneratorConfig(), seed: int = 0):
    """Return (source, target) datasets fully determined by ``seed``.

    ``cfg.noise_seed`` reseeds only the observation noise and missingness,
    leaving latent paths and labels untouched.
    """
    struct_rng = np.random.default_rng([seed, 2])
    latent_rng = np.random.default_rng([seed, 0])
    obs_rng = np.random.default_rng([seed if cfg.noise_seed is None else cfg.noise_seed, 1])

    shared, src_priv, tar_priv = feature_names(cfg)
    d = cfg.latent_dim
    load_shared = _unit_rows(struct_rng, cfg.n_shared, d)
    load_src = _unit_rows(struct_rng, cfg.n_source_private, d)
    # target-private readouts resemble a randomly chosen source feature
    pool = np.vstack([load_shared, load_src])
    parents = struct_rng.integers(0, pool.shape[0], size=cfg.n_target_private)
    fresh = _unit_rows(struct_rng, cfg.n_target_private, d)
    w = cfg.private_similarity
    load_tar = w * pool[parents] + (1 - w) * fresh if cfg.n_target_private else np.zeros((0, d))
    base_scale = struct_rng.uniform(0.8, 1.5, size=pool.shape[0] + cfg.n_target_private)
    base_offset = struct_rng.normal(scale=2.0, size=pool.shape[0] + cfg.n_target_private)
    tar_scale_shift = 1.0 + cfg.shift * struct_rng.uniform(-0.4, 0.4, size=cfg.n_shared)
    tar_offset_shift = cfg.shift * struct_rng.normal(size=cfg.n_shared)

    ns, nsp = cfg.n_shared, cfg.n_source_private
    src_load = np.vstack([load_shared, load_src])
    src_scale = base_scale[: ns + nsp]
    src_offset = base_offset[: ns + nsp]
    tar_load = np.vstack([load_shared, load_tar])
    tar_scale = np.concatenate([base_scale[:ns] * tar_scale_shift, base_scale[ns + nsp:]])
    tar_offset = np.concatenate([base_offset[:ns] + tar_offset_shift, base_offset[ns + nsp:]])

    src_paths, src_labels = _latent_cohort(cfg, latent_rng, cfg.n_source)
    tar_paths, tar_labels = _latent_cohort(cfg, latent_rng, cfg.n_target)

    src_names = shared + src_priv
    tar_names = shared + tar_priv
    src_records = _observe(src_paths, src_labels, "S", src_names, src_load, src_scale, src_offset, cfg, obs_rng)
    tar_records = _observe(tar_paths, tar_labels, "T", tar_names, tar_load, tar_scale, tar_offset, cfg, obs_rng)
    source = Dataset(FeatureSchema(src_names, shared), src_records)
    target = Dataset(FeatureSchema(tar_names, shared), tar_records)
    source.report["generator"] = {"seed": seed, **cfg.to_dict()}
    target.report["generator"] = {"seed": seed, **cfg.to_dict()}
    return source, target
