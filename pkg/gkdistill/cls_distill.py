"""Classifier distillation: the teacher's nearest-class-mean classifier, local KD and its
instance weights, plus the cross-entropy and standard KD baselines.
"""
from __future__ import annotations

from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Literal, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike

from gkdistill.autodiff import Matrix, Node, ParamGraph, load_checkpoint, ops, save_checkpoint
from gkdistill.datagen import Batch, LabeledDataset
from gkdistill.embed_distill import l2_normalize_rows
from gkdistill.errors import (
    DomainError,
    InvalidHyperparameterError,
    MissingClassError,
    ShapeMismatchError,
    StructuralError,
)
from gkdistill.model import MlpModel

logger = getLogger(__name__)

WeightMode = Literal["pl", "gap", "none"]
WEIGHT_MODES: tuple[WeightMode, ...] = ("pl", "gap", "none")
SINGLE_CLASS = "single-class"

PROTOTYPE_PARAMETER = "centers"


@dataclass(frozen=True)
class PrototypeSet:
    """Per-class centers of the teacher embedding; row c belongs to `class_ids[c]`."""

    centers: Matrix
    class_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.class_ids) != self.centers.rows:
            raise StructuralError(
                f"{len(self.class_ids)} class ids for {self.centers.rows} prototype rows"
            )
        zero_rows = np.flatnonzero(~np.any(self.centers.values != 0, axis=1))
        if zero_rows.size:
            raise DomainError(f"class {self.class_ids[zero_rows[0]]} has an all-zero prototype")

    def __len__(self) -> int:
        return self.centers.rows

    def save(self, directory: str | Path) -> Path:
        return save_checkpoint(
            directory, {PROTOTYPE_PARAMETER: self.centers}, class_ids=list(self.class_ids)
        )

    @classmethod
    def load(cls, directory: str | Path) -> PrototypeSet:
        parameters, manifest = load_checkpoint(directory)
        return cls(parameters[PROTOTYPE_PARAMETER], tuple(manifest.class_ids))


def class_prototypes(
    teacher_embeddings: ArrayLike,
    labels: ArrayLike,
    class_count: int | None = None,
    class_ids: Sequence[int] | None = None,
) -> PrototypeSet:
    """Class means in matrix form: diag(1 / (Y^T 1)) Y^T phi_T(X).

    >>> class_prototypes([[1.0, 0.0], [0.0, 1.0]], [0, 0]).centers.values
    array([[0.5, 0.5]])
    """
    embeddings = np.asarray(teacher_embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if embeddings.shape[0] != labels.shape[0]:
        raise ShapeMismatchError("class_prototypes", embeddings.shape, labels.shape)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 0
    class_ids = tuple(range(class_count)) if class_ids is None else tuple(class_ids)
    one_hot = np.zeros((labels.shape[0], class_count))
    one_hot[np.arange(labels.shape[0]), labels] = 1.0
    sizes = one_hot.sum(axis=0)
    if np.any(sizes == 0):
        raise MissingClassError(class_ids[int(np.flatnonzero(sizes == 0)[0])])
    centers = np.diag(1.0 / sizes) @ one_hot.T @ embeddings
    return PrototypeSet(Matrix(centers), class_ids)


@dataclass(frozen=True)
class NcmTeacher:
    """A frozen teacher embedding scored against prototypes of the student's classes.

    `scores` are the similarities divided by `temperature`; every softmax taken over them
    (local KD targets and pseudo-label weights) is therefore at that temperature.
    """

    teacher: MlpModel
    prototypes: PrototypeSet
    normalize: bool = True
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidHyperparameterError("temperature", self.temperature, "must be > 0")

    @classmethod
    def build(
        cls, teacher: MlpModel, dataset: LabeledDataset, normalize: bool = True, temperature: float = 1.0
    ) -> NcmTeacher:
        """Prototypes from the teacher embeddings of `dataset`, one per class of `dataset`."""
        embeddings = teacher.embed(dataset.x)
        if normalize:
            embeddings = l2_normalize_rows(embeddings)
        prototypes = class_prototypes(embeddings, dataset.labels, dataset.class_count, dataset.class_ids)
        return cls(teacher, prototypes, normalize, temperature)

    def embed(self, x: ArrayLike) -> np.ndarray:
        embeddings = self.teacher.embed(x)
        return l2_normalize_rows(embeddings) if self.normalize else embeddings

    def scores(self, x: ArrayLike) -> np.ndarray:
        return ncm_scores(self.embed(x), self.prototypes) / self.temperature


TeacherScores = Union[NcmTeacher, np.ndarray]


def ncm_scores(teacher_embeddings: ArrayLike, prototypes: PrototypeSet) -> np.ndarray:
    """Raw similarity scores phi_T(x) . p_c / |p_c| for every row and class."""
    centers = prototypes.centers.values
    return np.asarray(teacher_embeddings, dtype=np.float64) @ (
        centers / np.linalg.norm(centers, axis=1, keepdims=True)
    ).T


@dataclass(frozen=True)
class NcmPosterior:
    scores: np.ndarray
    probs: np.ndarray
    # The scores summed to a non-positive value, so `probs` is their softmax instead.
    degenerate_normalization: bool = False


def softmax(scores: ArrayLike, tau: float = 1.0) -> np.ndarray:
    """Row-wise (last axis) softmax of scores / tau."""
    scaled = np.asarray(scores, dtype=np.float64) / tau
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(scaled)
    return e / e.sum(axis=-1, keepdims=True)


def ncm_posterior(teacher_embedding_x: ArrayLike, prototypes: PrototypeSet) -> NcmPosterior:
    """Scores linearly normalized by their sum, or their softmax when the sum is not positive.

    >>> centers = PrototypeSet(Matrix([[2.0, 0.0], [0.0, 3.0]]), (0, 1))
    >>> ncm_posterior([1.0, 0.0], centers).probs
    array([1., 0.])
    """
    x = np.asarray(teacher_embedding_x, dtype=np.float64).reshape(-1)
    if not np.any(x != 0):
        raise DomainError("the teacher embedding of the instance is zero")
    scores = ncm_scores(x[None, :], prototypes)[0]
    total = scores.sum()
    if total > 0:
        return NcmPosterior(scores, scores / total)
    logger.debug(f"NCM scores sum to {total:.4g}; falling back to softmax normalization.")
    return NcmPosterior(scores, softmax(scores), degenerate_normalization=True)


@dataclass(frozen=True)
class LocalClassSet:
    """The sorted, distinct classes present in a mini-batch."""

    classes: tuple[int, ...]

    def __post_init__(self):
        if not self.classes:
            raise StructuralError("a local class set cannot be empty")
        if list(self.classes) != sorted(set(self.classes)):
            raise StructuralError(f"local classes must be sorted and distinct, got {self.classes}")

    @classmethod
    def from_labels(cls, labels: ArrayLike) -> LocalClassSet:
        return cls(tuple(int(c) for c in np.unique(np.asarray(labels))))

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def columns(self) -> np.ndarray:
        return np.asarray(self.classes, dtype=np.intp)


# ---- instance weights -----------------------------------------------------------------------


def _check_lambda(lam: float) -> None:
    if lam < 0:
        raise InvalidHyperparameterError("lambda", lam, "must be >= 0")


def adaptive_weight_pl(teacher_scores_over_s: ArrayLike, lam: float) -> np.ndarray:
    """2 lam sigmoid(-CE(softmax(scores), argmax)): the teacher's confidence in its own pseudo-label.

    Works on one score vector or a batch of rows. Ties in the argmax go to the first column,
    which is the lowest class id of a sorted local set. The result carries no gradient.

    >>> float(adaptive_weight_pl(np.log([0.5, 0.5]), 1.0).round(6))
    0.666667
    """
    _check_lambda(lam)
    probs = softmax(teacher_scores_over_s)
    pseudo = np.argmax(probs, axis=-1)
    ce = -np.log(np.take_along_axis(probs, np.expand_dims(pseudo, -1), axis=-1)[..., 0])
    return 2.0 * lam / (1.0 + np.exp(ce))


def adaptive_weight_gap(
    teacher_probs_over_s: ArrayLike,
    student_probs_over_s: ArrayLike,
    lam: float,
    teacher_classes: Sequence[int] | None = None,
    student_classes: Sequence[int] | None = None,
) -> np.ndarray:
    """2 lam sigmoid(-KL(teacher || student)) for distributions over the same local classes."""
    _check_lambda(lam)
    if teacher_classes is not None and student_classes is not None:
        if tuple(teacher_classes) != tuple(student_classes):
            raise StructuralError(
                f"teacher classes {tuple(teacher_classes)} differ from student classes {tuple(student_classes)}"
            )
    p = np.asarray(teacher_probs_over_s, dtype=np.float64)
    q = np.asarray(student_probs_over_s, dtype=np.float64)
    if p.shape != q.shape:
        raise StructuralError(f"teacher distribution of shape {p.shape} vs student of shape {q.shape}")
    support = p > 0
    log_ratio = np.where(support, np.log(np.where(support, p, 1.0)) - np.log(np.where(support, q, 1.0)), 0.0)
    kl = np.maximum((p * log_ratio).sum(axis=-1), 0.0)
    return 2.0 * lam / (1.0 + np.exp(kl))


# ---- objectives -----------------------------------------------------------------------------


def _resolve_scores(teacher: TeacherScores, batch: Batch) -> np.ndarray:
    if isinstance(teacher, NcmTeacher):
        return teacher.scores(batch.x)
    scores = np.asarray(teacher, dtype=np.float64)
    if scores.shape[0] != batch.x.shape[0]:
        raise ShapeMismatchError("teacher scores", scores.shape, batch.x.shape)
    return scores


def local_kd_terms(
    student_logits: Node, teacher_scores: ArrayLike, local_set: LocalClassSet, tau_student: float = 1.0
) -> Node:
    """Per-instance KL(softmax(teacher scores on S) || softmax(student logits on S / tau)), `B x 1`."""
    teacher_scores = np.asarray(teacher_scores, dtype=np.float64)
    if teacher_scores.shape != student_logits.shape:
        raise ShapeMismatchError("local_kd_loss", teacher_scores.shape, student_logits.shape)
    if local_set.classes[-1] >= student_logits.shape[1]:
        raise StructuralError(f"local classes {local_set.classes} exceed {student_logits.shape[1]} columns")
    columns = local_set.columns
    teacher_local = softmax(teacher_scores[:, columns])
    return ops.kl_rows_from_logits(teacher_local, ops.select_columns(student_logits, columns), tau_student)


def local_kd_loss(
    student_logits: Node,
    teacher_scores: ArrayLike,
    local_set: LocalClassSet,
    tau_student: float = 1.0,
    weights: ArrayLike | None = None,
) -> Node:
    """Batch mean of the local KD terms, optionally weighted per instance.

    A single-class local set makes both distributions [1]: the loss is a constant zero flagged
    "single-class".
    """
    if len(local_set) == 1:
        logger.debug(f"Local class set {local_set.classes} has a single class; the local KD loss is 0.")
        return student_logits.tape.constant(0.0).with_flags(SINGLE_CLASS)
    terms = local_kd_terms(student_logits, teacher_scores, local_set, tau_student)
    if weights is not None:
        terms = ops.mul(terms, np.asarray(weights, dtype=np.float64).reshape(-1, 1))
    return ops.mean(terms)


def instance_weights(
    weight_mode: WeightMode,
    teacher_scores: np.ndarray,
    student_logits: np.ndarray,
    local_set: LocalClassSet,
    lam: float,
    tau_student: float = 1.0,
) -> np.ndarray:
    """The per-instance weight of the local KD term for the given mode (constants)."""
    columns = local_set.columns
    if weight_mode == "none":
        _check_lambda(lam)
        return np.full(teacher_scores.shape[0], float(lam))
    if weight_mode == "pl":
        return adaptive_weight_pl(teacher_scores[:, columns], lam)
    if weight_mode == "gap":
        return adaptive_weight_gap(
            softmax(teacher_scores[:, columns]), softmax(student_logits[:, columns], tau_student), lam
        )
    raise InvalidHyperparameterError("weight_mode", weight_mode, f"must be one of {WEIGHT_MODES}")


def cross_entropy_objective(graph: ParamGraph, model: MlpModel, batch: Batch) -> Node:
    """Mean cross-entropy of the model's predictions against the batch labels."""
    logits = model.logits_node(graph, model.embed_node(graph, batch.x))
    return ops.mean(ops.cross_entropy_rows(logits, batch.y))


def refilled_objective(
    graph: ParamGraph,
    model: MlpModel,
    batch: Batch,
    teacher: TeacherScores,
    lam: float = 2.0,
    tau_student: float = 1.0,
    weight_mode: WeightMode = "pl",
    weights: ArrayLike | None = None,
    embedding: Node | None = None,
) -> Node:
    """Batch mean of CE(f(x), y) + lambda_i * local KD.

    `teacher` is an `NcmTeacher` or the precomputed `B x C` teacher scores of the batch. Pass
    `weights` to use fixed instance weights instead of those of `weight_mode`, and `embedding` to
    reuse an embedding node already computed on `graph`.
    """
    if weight_mode not in WEIGHT_MODES:
        raise InvalidHyperparameterError("weight_mode", weight_mode, f"must be one of {WEIGHT_MODES}")
    _check_lambda(lam)
    if embedding is None:
        embedding = model.embed_node(graph, batch.x)
    logits = model.logits_node(graph, embedding)
    ce = ops.mean(ops.cross_entropy_rows(logits, batch.y))
    if lam == 0 and weights is None:
        return ce
    local_set = LocalClassSet.from_labels(batch.y)
    if len(local_set) == 1:
        logger.debug("Single-class batch: the refilled objective reduces to cross-entropy.")
        return ce.with_flags(SINGLE_CLASS)
    scores = _resolve_scores(teacher, batch)
    if weights is None:
        weights = instance_weights(weight_mode, scores, logits.value, local_set, lam, tau_student)
    return ops.add(ce, local_kd_loss(logits, scores, local_set, tau_student, weights))


def standard_kd_loss(
    student_logits: Node,
    teacher_logits: ArrayLike,
    y: ArrayLike,
    lam: float = 1.0,
    tau_teacher: float = 4.0,
    tau_student: float = 1.0,
) -> Node:
    """Batch mean of CE(f(x), y) + lam * KL(softmax(f_T(x) / tau_T) || softmax(f(x) / tau_S))."""
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if teacher_logits.shape != student_logits.shape:
        raise StructuralError(
            f"standard KD needs the same classes: teacher logits {teacher_logits.shape} "
            f"vs student logits {student_logits.shape}"
        )
    _check_lambda(lam)
    ce = ops.mean(ops.cross_entropy_rows(student_logits, y))
    if lam == 0:
        return ce
    return ops.add(ce, ops.scale(kd_term(student_logits, teacher_logits, tau_teacher, tau_student), lam))


def kd_term(student_logits: Node, teacher_logits: ArrayLike, tau_teacher: float, tau_student: float) -> Node:
    """Batch mean of KL(softmax(f_T(x) / tau_T) || softmax(f(x) / tau_S)), without the CE part."""
    if not tau_teacher > 0:
        raise InvalidHyperparameterError("tau_teacher", tau_teacher, "must be > 0")
    targets = softmax(teacher_logits, tau_teacher)
    return ops.mean(ops.kl_rows_from_logits(targets, student_logits, tau_student))


def shared_teacher_columns(teacher_class_ids: Sequence[int], student_class_ids: Sequence[int]) -> np.ndarray:
    """Teacher head columns of the student's classes, for standard KD.

    Standard KD needs every student class to be a teacher class.
    """
    position = {c: i for i, c in enumerate(teacher_class_ids)}
    missing = [c for c in student_class_ids if c not in position]
    if missing:
        raise StructuralError(f"standard KD needs every student class in the teacher; missing {missing}")
    return np.asarray([position[c] for c in student_class_ids], dtype=np.intp)
