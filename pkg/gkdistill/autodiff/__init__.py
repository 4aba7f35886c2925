"""Dense float64 matrices with reverse-mode differentiation."""
from . import ops
from .checkpoint import CheckpointManifest, load_checkpoint, save_checkpoint
from .gradcheck import GradientCheck, finite_diff_grad, gradient_check
from .matrix import Matrix
from .tape import Node, ParamGraph, Tape, grad

__all__ = [
    "CheckpointManifest",
    "GradientCheck",
    "Matrix",
    "Node",
    "ParamGraph",
    "Tape",
    "finite_diff_grad",
    "grad",
    "gradient_check",
    "load_checkpoint",
    "ops",
    "save_checkpoint",
]
