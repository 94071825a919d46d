"""Cross-dataset transfer learning for EMR time series.

A multi-channel GRU encoder is trained on a large source cohort, made
domain-invariant with adversarial training and teacher distillation, and its
per-feature channels are transferred to a small target cohort, matching
features that only the target records by DTW similarity.
"""

from .data import Dataset, FeatureSchema, PatientRecord, align_schemas, impute_and_normalize, load_csv, save_csv
from .dtw import TransferMap, build_transfer_map, dtw_distance
from .errors import (CheckpointError, ConfigError, DataError, DivergenceError, NonFiniteError, ShapeError,
                     TransferError)
from .losses import LossWeights
from .metrics import metric_auroc, metric_mse_mad
from .pipeline import RunConfig, run_experiment
from .synthetic import GeneratorConfig, synth_generate

__all__ = [
    "CheckpointError", "ConfigError", "DataError", "Dataset", "DivergenceError", "FeatureSchema",
    "GeneratorConfig", "LossWeights", "NonFiniteError", "PatientRecord", "RunConfig", "ShapeError",
    "TransferError", "TransferMap", "align_schemas", "build_transfer_map", "dtw_distance",
    "impute_and_normalize", "load_csv", "metric_auroc", "metric_mse_mad", "run_experiment", "save_csv",
    "synth_generate",
]
