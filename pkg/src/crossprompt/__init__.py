"""Incomplete multi-modal emotion recognition via cross-modal prompting.

Training/evaluation toolkit for three-modality (audio/text/video) feature
datasets with missing instances: masked data handling, two-stage training with
prototype-based prompts, gradient-modulated prototype learning, cross-modal
knowledge propagation, coordinator-weighted fusion, and a sweep/ablation
harness. Scikit-learn style estimators wrap the whole pipeline.
"""

from .data import (
    MODALITIES,
    LabelSet,
    MissingMask,
    ModalityBatch,
    SyntheticSpec,
    generate_synthetic,
    make_missing_mask,
    read_dataset,
    write_dataset,
    zero_impute,
)
from .estimator import CrossPromptClassifier, CrossPromptRegressor
from .evaluation import RunReport, ablation_grid, compute_metrics, mr_sweep, run_experiment
from .network import CrossModalNet
from .training import TrainConfig, load_checkpoint, save_checkpoint, set_determinism
from .validation import CorruptDatasetError, InfeasibleMissingRateError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "MODALITIES",
    "LabelSet",
    "MissingMask",
    "ModalityBatch",
    "SyntheticSpec",
    "generate_synthetic",
    "make_missing_mask",
    "read_dataset",
    "write_dataset",
    "zero_impute",
    "CrossPromptClassifier",
    "CrossPromptRegressor",
    "RunReport",
    "ablation_grid",
    "compute_metrics",
    "mr_sweep",
    "run_experiment",
    "CrossModalNet",
    "TrainConfig",
    "load_checkpoint",
    "save_checkpoint",
    "set_determinism",
    "CorruptDatasetError",
    "InfeasibleMissingRateError",
    "ValidationError",
    "__version__",
]
