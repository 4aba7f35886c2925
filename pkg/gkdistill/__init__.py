"""Generalized knowledge distillation between small models, by matching instance relationships."""
from . import autodiff, errors
from .cls_distill import NcmTeacher, PrototypeSet, class_prototypes, refilled_objective
from .config import ExperimentConfig, load_config, parse_config, save_config
from .datagen import LabeledDataset, make_gaussian_clusters, restrict, sliding_window_split
from .embed_distill import comparison_matching_loss, mine_semihard_tuples
from .evalkit import accuracy, harmonic_mean, ncm_accuracy
from .model import MlpModel
from .trainer import distill_student, train_teacher

__all__ = [
    "ExperimentConfig",
    "LabeledDataset",
    "MlpModel",
    "NcmTeacher",
    "PrototypeSet",
    "accuracy",
    "autodiff",
    "class_prototypes",
    "comparison_matching_loss",
    "distill_student",
    "errors",
    "harmonic_mean",
    "load_config",
    "make_gaussian_clusters",
    "mine_semihard_tuples",
    "ncm_accuracy",
    "parse_config",
    "refilled_objective",
    "restrict",
    "save_config",
    "sliding_window_split",
    "train_teacher",
]
