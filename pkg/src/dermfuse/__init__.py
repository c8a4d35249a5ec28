"""dermfuse: desk-scale multimodal image+metadata fusion classification.

Everything runs on a small float64 reverse-mode autodiff engine; see
tensor.py for the op set and finite_diff_check for the verification oracle.
"""

from .backbones import TinyCnn, TinyDualVit, TinyVit
from .data import SyntheticSpec, generate_synthetic, stratified_kfold
from .experiment import ExperimentConfig, parse_config, run_experiment, write_report
from .fusion import (
    ConcatFusion,
    FusionModel,
    MatFusion,
    MetaBlockFusion,
    MetaNetFusion,
    ReducerHead,
    adapt,
)
from .metrics import balanced_accuracy, roc_auc_ovr_macro
from .optim import EarlyStopper, PlateauScheduler, Sgd, SgdConfig, TrainConfig, train_model
from .tensor import Tensor, finite_diff_check, no_grad

__all__ = [
    "ConcatFusion",
    "EarlyStopper",
    "ExperimentConfig",
    "FusionModel",
    "MatFusion",
    "MetaBlockFusion",
    "MetaNetFusion",
    "PlateauScheduler",
    "ReducerHead",
    "Sgd",
    "SgdConfig",
    "SyntheticSpec",
    "Tensor",
    "TinyCnn",
    "TinyDualVit",
    "TinyVit",
    "TrainConfig",
    "adapt",
    "balanced_accuracy",
    "finite_diff_check",
    "generate_synthetic",
    "no_grad",
    "parse_config",
    "roc_auc_ovr_macro",
    "run_experiment",
    "stratified_kfold",
    "train_model",
    "write_report",
]
__version__ = "0.1.0"
