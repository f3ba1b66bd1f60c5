"""Bayesian active-learning distillation for LiDAR range-image segmentation."""

from .alloop import ExperimentConfig, PoolState, dry_run, init_pool, n_al_steps, run_experiment
from .augment import AugPolicy, AugStep, apply_policy
from .exceptions import ALDistillError, ConfigError, FormatError, IntegrityError, NumericError
from .heuristics import AggregationSpec, aggregate, bald, predictive_entropy, rank_pool
from .metrics import LearningCurve, confusion_matrix, iou, labeling_efficiency
from .model import Architecture, RangeSegmenter, TrainConfig, grad_check, mc_predict
from .projection import RangeImage, SensorConfig, SphericalProjector, project, unproject
from .scan_io import DatasetManifest, LabeledPointCloud, SyntheticSpec, gen_synthetic_dataset, load_labels, load_scan

__version__ = "0.1.0"

__all__ = [
    "ALDistillError", "AggregationSpec", "Architecture", "AugPolicy", "AugStep", "ConfigError",
    "DatasetManifest", "ExperimentConfig", "FormatError", "IntegrityError", "LabeledPointCloud",
    "LearningCurve", "NumericError", "PoolState", "RangeImage", "RangeSegmenter", "SensorConfig",
    "SphericalProjector", "SyntheticSpec", "TrainConfig", "aggregate", "apply_policy", "bald",
    "confusion_matrix", "dry_run", "gen_synthetic_dataset", "grad_check", "init_pool", "iou",
    "labeling_efficiency", "load_labels", "load_scan", "mc_predict", "n_al_steps", "predictive_entropy",
    "project", "rank_pool", "run_experiment", "unproject",
]
