"""Metrics and analysis studies."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
from numpy.typing import ArrayLike

from gkdistill.autodiff import grad, ops
from gkdistill.cls_distill import (
    LocalClassSet,
    NcmTeacher,
    adaptive_weight_pl,
    kd_term,
    local_kd_loss,
    shared_teacher_columns,
)
from gkdistill.datagen import LabeledDataset, restrict, sample_balanced_batch
from gkdistill.errors import (
    EmptyDatasetError,
    InvalidHyperparameterError,
    MissingClassError,
    MixedScaleError,
    StructuralError,
    UndefinedAucError,
)
from gkdistill.model import HEAD, MlpModel

logger = getLogger(__name__)

EmbeddingFn = Callable[[np.ndarray], np.ndarray]
JointMode = Literal["own-embedding", "student-embedding"]


def _require_instances(dataset: LabeledDataset, what: str = "dataset") -> None:
    if len(dataset) == 0:
        raise EmptyDatasetError(f"cannot evaluate on an empty {what}")


def accuracy(model: MlpModel, dataset: LabeledDataset) -> float:
    """Fraction of instances whose largest logit is their label (ties go to the lowest class)."""
    _require_instances(dataset)
    return float(np.mean(model.predict(dataset.x) == dataset.labels))


def ncm_accuracy(embedding_fn: EmbeddingFn, train: LabeledDataset, test: LabeledDataset) -> float:
    """Accuracy of the nearest class center (Euclidean, in the embedding) on `test`."""
    _require_instances(train, "training set")
    _require_instances(test, "test set")
    train_embeddings = embedding_fn(train.x)
    counts = train.class_sizes()
    if np.any(counts == 0):
        raise MissingClassError(train.class_ids[int(np.flatnonzero(counts == 0)[0])], "has no training instance")
    centers = np.stack([train_embeddings[train.labels == c].mean(axis=0) for c in range(train.class_count)])
    test_embeddings = embedding_fn(test.x)
    distances = (
        (test_embeddings**2).sum(axis=1, keepdims=True)
        - 2.0 * test_embeddings @ centers.T
        + (centers**2).sum(axis=1)
    )
    return float(np.mean(np.argmin(distances, axis=1) == test.labels))


def nearest_neighbor_accuracy(embedding_fn: EmbeddingFn, train: LabeledDataset, test: LabeledDataset) -> float:
    """Accuracy of the 1-nearest-neighbor rule (ties go to the first training instance)."""
    _require_instances(train, "training set")
    _require_instances(test, "test set")
    a, b = embedding_fn(test.x), embedding_fn(train.x)
    distances = (a**2).sum(axis=1, keepdims=True) - 2.0 * a @ b.T + (b**2).sum(axis=1)
    return float(np.mean(train.labels[np.argmin(distances, axis=1)] == test.labels))


def harmonic_mean(acc_old: float, acc_new: float, scale: Literal["auto", "percent", "fraction"] = "auto") -> float:
    """2ab / (a + b), 0 when both are 0.

    With `scale="auto"`, a value above 1 means both are percentages. The other value may then not
    lie in (0, 1): that pair mixes scales. A pair of exactly 1.0 and a percentage (1% or a perfect
    fraction) needs an explicit `scale`.

    >>> round(harmonic_mean(63.73, 31.97), 2)
    42.58
    >>> round(harmonic_mean(49.85, 45.70), 2)
    47.68
    >>> round(harmonic_mean(1.0, 50.0, scale="percent"), 4)
    1.9608
    """
    a, b = float(acc_old), float(acc_new)
    if scale == "auto":
        if max(a, b) > 1 and min(a, b) == 1:
            raise MixedScaleError(
                f"{min(a, b):g} next to {max(a, b):g} may be 1% or 100%; pass scale='percent' or scale='fraction'"
            )
        if max(a, b) > 1 and 0 < min(a, b) < 1:
            raise MixedScaleError(f"cannot tell whether {a} and {b} are fractions or percentages")
        scale = "percent" if max(a, b) > 1 else "fraction"
    upper = 100.0 if scale == "percent" else 1.0
    if not (0 <= a <= upper and 0 <= b <= upper):
        raise MixedScaleError(f"accuracies {a} and {b} are not both in [0, {upper:g}]")
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


# ---- joint incremental classifier -----------------------------------------------------------


def _unit_columns(weight: np.ndarray) -> np.ndarray:
    return weight / np.maximum(np.linalg.norm(weight, axis=0, keepdims=True), 1e-12)


@dataclass(frozen=True)
class JointHead:
    """Unit-norm class columns of a student and a teacher over the union of their classes.

    `class_ids` is the sorted union. A class of both models uses the student's column.
    """

    student: MlpModel
    teacher: MlpModel
    class_ids: tuple[int, ...]
    # Column u of `weights` belongs to class_ids[u]; `from_student[u]` tells which model it came from.
    weights: np.ndarray
    from_student: np.ndarray

    def scores(self, x: ArrayLike, mode: JointMode = "own-embedding") -> np.ndarray:
        student_embedding = self.student.embed(x)
        if mode == "student-embedding":
            if self.student.embed_dim != self.teacher.embed_dim:
                raise StructuralError(
                    f"student-embedding mode needs equal embedding sizes, got "
                    f"{self.student.embed_dim} and {self.teacher.embed_dim}"
                )
            return student_embedding @ self.weights
        if mode != "own-embedding":
            raise InvalidHyperparameterError("mode", mode, "must be 'own-embedding' or 'student-embedding'")
        # Each model scores its own columns with its own (unit-norm) embedding.
        student_part = _unit_rows(student_embedding) @ self.weights[: self.student.embed_dim, self.from_student]
        teacher_part = _unit_rows(self.teacher.embed(x)) @ self.weights[: self.teacher.embed_dim, ~self.from_student]
        scores = np.empty((student_part.shape[0], len(self.class_ids)))
        scores[:, self.from_student] = student_part
        scores[:, ~self.from_student] = teacher_part
        return scores

    def predict(self, x: ArrayLike, mode: JointMode = "own-embedding") -> np.ndarray:
        """Original class ids of the best-scoring union column (ties go to the lowest id)."""
        return np.asarray(self.class_ids)[np.argmax(self.scores(x, mode), axis=1)]


def _unit_rows(embeddings: np.ndarray) -> np.ndarray:
    return embeddings / np.maximum(np.linalg.norm(embeddings, axis=1, keepdims=True), 1e-12)


def build_joint_head(student: MlpModel, teacher: MlpModel) -> JointHead:
    if not student.class_ids or not teacher.class_ids:
        raise StructuralError("both models need class ids to build a joint classifier")
    union = tuple(sorted(set(student.class_ids) | set(teacher.class_ids)))
    student_cols = {c: i for i, c in enumerate(student.class_ids)}
    teacher_cols = {c: i for i, c in enumerate(teacher.class_ids)}
    student_w = _unit_columns(student.parameters[HEAD].values)
    teacher_w = _unit_columns(teacher.parameters[HEAD].values)
    from_student = np.array([c in student_cols for c in union])
    # Columns are zero-padded to the larger embedding size.
    weights = np.zeros((max(student.embed_dim, teacher.embed_dim), len(union)))
    for u, c in enumerate(union):
        column = student_w[:, student_cols[c]] if c in student_cols else teacher_w[:, teacher_cols[c]]
        weights[: column.shape[0], u] = column
    return JointHead(student, teacher, union, weights, from_student)


@dataclass(frozen=True)
class IncrementalReport:
    """Accuracy in the union label space of old-class instances, new-class instances, all
    instances, and the harmonic mean of the first two (fractions; NaN when a group is empty)."""

    old_to_all: float
    new_to_all: float
    overall: float
    harmonic: float
    mode: str


def joint_incremental_classifier(
    student: MlpModel,
    teacher: MlpModel,
    old_test: LabeledDataset,
    new_test: LabeledDataset,
    mode: JointMode = "own-embedding",
) -> tuple[JointHead, IncrementalReport]:
    """Builds the joint head and scores it on the union label space.

    `old_test` holds instances of the teacher's classes and `new_test` those of the student's
    classes; both carry the original class ids. Old instances of classes the student also has are
    left out of every accuracy: `new_test` already covers those classes.
    """
    head = build_joint_head(student, teacher)
    union = set(head.class_ids)
    student_classes = set(student.class_ids)
    old_ids = np.asarray(old_test.class_ids)[old_test.labels] if len(old_test) else np.zeros(0, dtype=int)
    new_ids = np.asarray(new_test.class_ids)[new_test.labels] if len(new_test) else np.zeros(0, dtype=int)
    unknown = (set(old_ids.tolist()) | set(new_ids.tolist())) - union
    if unknown:
        raise StructuralError(f"classes {sorted(unknown)} are in neither model")
    if not set(new_ids.tolist()) <= student_classes:
        raise StructuralError("the new-class test set holds classes the student was not trained on")

    old_mask = ~np.isin(old_ids, list(student_classes))
    old_correct = head.predict(old_test.x[old_mask], mode) == old_ids[old_mask] if old_mask.any() else np.zeros(0, bool)
    new_correct = head.predict(new_test.x, mode) == new_ids if len(new_test) else np.zeros(0, bool)
    all_correct = np.concatenate([old_correct, new_correct])
    if all_correct.size == 0:
        raise EmptyDatasetError("no instance to evaluate the joint classifier on")

    old_acc = float(old_correct.mean()) if old_correct.size else float("nan")
    new_acc = float(new_correct.mean()) if new_correct.size else float("nan")
    harmonic = harmonic_mean(old_acc, new_acc, "fraction") if old_correct.size and new_correct.size else float("nan")
    report = IncrementalReport(old_acc, new_acc, float(all_correct.mean()), harmonic, mode)
    logger.info(f"Joint classifier ({mode}): {report}")
    return head, report


# ---- instance weights -----------------------------------------------------------------------


def rank_auc(scores: ArrayLike, positive: ArrayLike) -> float:
    """Mann-Whitney AUC of `scores` for the `positive` flags, with ties given average ranks.

    >>> rank_auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True])
    0.75
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positive = np.asarray(positive, dtype=bool).reshape(-1)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("the AUC needs both positive and negative instances")
    unique, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    # Average 1-based rank of every distinct value.
    ends = np.cumsum(counts)
    average_rank = ends - (counts - 1) / 2.0
    ranks = average_rank[inverse]
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass(frozen=True)
class WeightStudy:
    weights: np.ndarray
    seen_flags: np.ndarray
    auc: float
    bin_edges: np.ndarray
    seen_counts: np.ndarray
    unseen_counts: np.ndarray

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["lambda_i", "seen_flag"])
            writer.writerows((repr(float(w)), int(s)) for w, s in zip(self.weights, self.seen_flags))


def weight_histogram_edges(lam: float, width: float = 0.05) -> np.ndarray:
    bins = max(1, int(np.ceil(lam / width - 1e-9)))
    return np.linspace(0.0, lam, bins + 1)


def weight_study(
    teacher: NcmTeacher, instances: ArrayLike, seen_flags: ArrayLike, lam: float = 1.0
) -> WeightStudy:
    """Pseudo-label weights of every instance over all prototype classes, and how well they
    separate instances of classes the teacher was trained on (seen) from the others."""
    flags = np.asarray(seen_flags, dtype=bool).reshape(-1)
    scores = teacher.scores(instances)
    if scores.shape[0] != flags.shape[0]:
        raise StructuralError(f"{flags.shape[0]} seen flags for {scores.shape[0]} instances")
    weights = adaptive_weight_pl(scores, lam)
    auc = rank_auc(weights, flags)
    edges = weight_histogram_edges(lam)
    seen_counts, _ = np.histogram(weights[flags], bins=edges)
    unseen_counts, _ = np.histogram(weights[~flags], bins=edges)
    logger.info(f"Weight study: AUC of seen vs unseen = {auc:.4f}")
    return WeightStudy(weights, flags, auc, edges, seen_counts, unseen_counts)


# ---- head gradients -------------------------------------------------------------------------


@dataclass
class GradientNormReport:
    class_counts: list[int] = field(default_factory=list)
    kd_norm_diff: list[float] = field(default_factory=list)
    lkd_norm_diff: list[float] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["class_count", "kd_norm_diff", "lkd_norm_diff"])
            for row in zip(self.class_counts, self.kd_norm_diff, self.lkd_norm_diff):
                writer.writerow([row[0], repr(row[1]), repr(row[2])])


StudentFactory = Callable[[int, int], MlpModel]


def head_gradient_differences(
    student: MlpModel,
    x: np.ndarray,
    y: np.ndarray,
    teacher_logits: np.ndarray,
    teacher_scores: np.ndarray,
    tau_teacher: float,
    tau_student: float,
    lam: float = 1.0,
) -> tuple[float, float]:
    """Mean over head columns of |dO_ce/dw_c - dO_kd/dw_c| and |dO_ce/dw_c - dO_lkd/dw_c|.

    O_kd adds lam * KD over all columns to the cross-entropy, O_lkd adds lam * local KD over the
    classes present in `y`. Gradients come from autodiff.
    """
    def head_grad(extra: Callable | None) -> np.ndarray:
        graph = student.graph()
        logits = student.logits_node(graph, student.embed_node(graph, x))
        loss = ops.mean(ops.cross_entropy_rows(logits, y))
        if extra is not None and lam != 0:
            loss = ops.add(loss, ops.scale(extra(logits), lam))
        return grad(loss, graph)[HEAD]

    ce = head_grad(None)
    kd = head_grad(lambda logits: kd_term(logits, teacher_logits, tau_teacher, tau_student))
    local_set = LocalClassSet.from_labels(y)
    lkd = head_grad(lambda logits: local_kd_loss(logits, teacher_scores, local_set, tau_student))
    kd_diff = float(np.linalg.norm(ce - kd, axis=0).mean())
    lkd_diff = float(np.linalg.norm(ce - lkd, axis=0).mean())
    return kd_diff, lkd_diff


def gradient_norm_study(
    dataset: LabeledDataset,
    teacher: MlpModel,
    student_factory: StudentFactory,
    class_count_grid: Sequence[int],
    classes_per_batch: int = 8,
    instances_per_class: int = 4,
    tau_teacher: float = 4.0,
    tau_student: float = 1.0,
    lam: float = 1.0,
    repeats: int = 5,
    seed: int = 0,
) -> GradientNormReport:
    """Head-gradient differences between CE and the KD/LKD objectives of a freshly initialized
    student, as the number of classes of the task grows.

    For each grid value C, every repeat samples C classes of `dataset` (which must all be teacher
    classes), a balanced batch of up to `classes_per_batch` of them and a student with C outputs
    from `student_factory(C, seed)`.
    """
    grid = [int(c) for c in class_count_grid]
    if not grid or any(c < 2 for c in grid):
        raise InvalidHyperparameterError("class_count_grid", grid, "values must be >= 2")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise InvalidHyperparameterError("class_count_grid", grid, "must be strictly increasing")
    if grid[-1] > dataset.class_count:
        raise InvalidHyperparameterError(
            "class_count_grid", grid, f"values must be <= the {dataset.class_count} classes of the dataset"
        )

    rng = np.random.default_rng(seed)
    report = GradientNormReport()
    for class_count in grid:
        kd_diffs, lkd_diffs = [], []
        for repeat in range(repeats):
            classes = np.sort(rng.choice(dataset.class_count, size=class_count, replace=False))
            task = restrict(dataset, classes.tolist(), 0.5, seed=int(rng.integers(2**31)))
            ncm = NcmTeacher.build(teacher, task.train)
            indices = sample_balanced_batch(
                task.train, min(classes_per_batch, class_count), instances_per_class, rng
            )
            batch = task.train.take(indices)
            columns = shared_teacher_columns(teacher.class_ids, task.train.class_ids)
            student = student_factory(class_count, seed + repeat)
            kd_diff, lkd_diff = head_gradient_differences(
                student,
                batch.x,
                batch.y,
                teacher.logits(batch.x)[:, columns],
                ncm.scores(batch.x),
                tau_teacher,
                tau_student,
                lam,
            )
            kd_diffs.append(kd_diff)
            lkd_diffs.append(lkd_diff)
        report.class_counts.append(class_count)
        report.kd_norm_diff.append(float(np.mean(kd_diffs)))
        report.lkd_norm_diff.append(float(np.mean(lkd_diffs)))
        logger.info(
            f"Gradient study, {class_count} classes: KD diff {report.kd_norm_diff[-1]:.4g}, "
            f"LKD diff {report.lkd_norm_diff[-1]:.4g}"
        )
    return report
