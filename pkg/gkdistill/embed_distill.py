"""Embedding distillation: semi-hard tuple mining and comparison matching.

A tuple (anchor, positive, impostor_1, ..., impostor_K) is turned into a probability over its
K + 1 candidates by a tempered softmax of the negated anchor-to-candidate distances. The student
embedding is trained so that these probabilities match the ones computed on the teacher
embedding.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numpy.typing import ArrayLike

from gkdistill.autodiff import Node, ops
from gkdistill.errors import DomainError, InvalidHyperparameterError, ShapeMismatchError

logger = getLogger(__name__)

EMPTY_TUPLES = "empty-tuples"


@dataclass(frozen=True)
class ComparisonTuple:
    """Batch indices of an anchor, a same-class positive and K different-class impostors.

    Impostors are kept sorted by batch index.
    """

    anchor: int
    positive: int
    impostors: tuple[int, ...]

    def __post_init__(self):
        if self.anchor == self.positive:
            raise ValueError(f"anchor and positive must differ, both are {self.anchor}")
        if not self.impostors:
            raise ValueError("a comparison tuple needs at least one impostor")
        if len(set(self.impostors)) != len(self.impostors):
            raise ValueError(f"duplicate impostors: {self.impostors}")

    @property
    def candidates(self) -> tuple[int, ...]:
        """The positive followed by the impostors: the order of `TupleProbability.probs`."""
        return (self.positive, *self.impostors)

    @property
    def k(self) -> int:
        return len(self.impostors)


@dataclass(frozen=True)
class TupleProbability:
    # [positive, impostor_1, ..., impostor_K]
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size < 2 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise DomainError(f"tuple probabilities must lie on the simplex, got {probs}")


@dataclass
class MinedTuples:
    """Tuples mined from one batch, plus what was left out."""

    tuples: list[ComparisonTuple] = field(default_factory=list)
    # The batch has no two instances of the same class.
    no_positive_pairs: bool = False
    # (anchor, positive) pairs without any qualifying impostor.
    skipped_pairs: int = 0

    def __len__(self) -> int:
        return len(self.tuples)

    def __iter__(self) -> Iterator[ComparisonTuple]:
        return iter(self.tuples)


def l2_normalize_rows(embeddings: ArrayLike, eps: float = 1e-12) -> np.ndarray:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(embeddings, axis=1, keepdims=True), eps)
    return embeddings / norms


def distance_matrix(embeddings: ArrayLike) -> np.ndarray:
    """Euclidean distances between all rows, computed like `ops.pairwise_distances`."""
    e = np.asarray(embeddings, dtype=np.float64)
    sq = (e**2).sum(axis=1, keepdims=True)
    squared = np.maximum(sq + sq.T - 2.0 * (e @ e.T), 0.0)
    np.fill_diagonal(squared, 0.0)
    return np.sqrt(squared)


def _check_temperature(name: str, tau: float) -> None:
    if not tau > 0:
        raise InvalidHyperparameterError(name, tau, "must be > 0")


def mine_semihard_tuples(
    batch_embeddings: ArrayLike, batch_labels: ArrayLike, max_impostors: int | None = None
) -> MinedTuples:
    """One tuple per ordered (anchor, positive) pair of same-class batch members.

    The impostors of a pair are all the different-class members that are farther from the anchor
    than the positive is. With `max_impostors`, only that many of the closest ones are kept (ties
    go to the lower batch index). Pairs without any impostor are skipped.

    Distances are measured on the rows as given; pass l2-normalized embeddings.
    """
    embeddings = np.asarray(batch_embeddings, dtype=np.float64)
    labels = np.asarray(batch_labels).reshape(-1)
    if embeddings.shape[0] != labels.shape[0]:
        raise ShapeMismatchError("mine_semihard_tuples", embeddings.shape, labels.shape)
    if max_impostors is not None and max_impostors < 1:
        max_impostors = None

    dist = distance_matrix(embeddings)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    if not same.any():
        logger.debug(f"No same-class pair in a batch of {len(labels)} instances.")
        return MinedTuples(no_positive_pairs=True)

    mined = MinedTuples()
    for anchor in range(len(labels)):
        different = labels != labels[anchor]
        for positive in np.flatnonzero(same[anchor]):
            candidates = np.flatnonzero(different & (dist[anchor] > dist[anchor, positive]))
            if candidates.size == 0:
                mined.skipped_pairs += 1
                continue
            if max_impostors is not None and candidates.size > max_impostors:
                order = np.lexsort((candidates, dist[anchor, candidates]))
                candidates = np.sort(candidates[order[:max_impostors]])
            mined.tuples.append(
                ComparisonTuple(int(anchor), int(positive), tuple(int(i) for i in candidates))
            )
    if not mined.tuples:
        logger.debug(f"All {mined.skipped_pairs} positive pairs of the batch lack an impostor.")
    return mined


def tuple_probability_from_distances(distances: ArrayLike, tau: float = 1.0) -> TupleProbability:
    """Tempered softmax over the negated distances [D(a, p), D(a, n_1), ..., D(a, n_K)].

    >>> tuple_probability_from_distances([0.0, np.log(2.0)]).probs.round(6)
    array([0.666667, 0.333333])
    """
    _check_temperature("tau", tau)
    logits = -np.asarray(distances, dtype=np.float64) / tau
    logits = logits - logits.max()
    probs = np.exp(logits)
    return TupleProbability(probs / probs.sum())


def tuple_probability(embeddings: ArrayLike, comparison: ComparisonTuple, tau: float) -> TupleProbability:
    _check_temperature("tau", tau)
    e = np.asarray(embeddings, dtype=np.float64)
    candidates = list(comparison.candidates)
    distances = distance_matrix(e[[comparison.anchor, *candidates]])[0, 1:]
    return tuple_probability_from_distances(distances, tau)


def _tuple_table(tuples: Sequence[ComparisonTuple]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Anchors (T,), padded candidate indices (T, K_max + 1) and the matching validity mask."""
    width = 1 + max(t.k for t in tuples)
    anchors = np.array([t.anchor for t in tuples], dtype=np.intp)
    columns = np.empty((len(tuples), width), dtype=np.intp)
    mask = np.zeros((len(tuples), width), dtype=bool)
    for row, t in enumerate(tuples):
        candidates = t.candidates
        columns[row, : len(candidates)] = candidates
        columns[row, len(candidates) :] = t.positive
        mask[row, : len(candidates)] = True
    return anchors, columns, mask


def _anchor_weights(anchors: np.ndarray) -> np.ndarray:
    """Weights giving every anchor the same total weight, split evenly among its tuples."""
    _, inverse, counts = np.unique(anchors, return_inverse=True, return_counts=True)
    return (1.0 / (counts[inverse] * len(counts))).reshape(-1, 1)


def teacher_tuple_targets(
    teacher_embeddings: ArrayLike,
    tuples: Sequence[ComparisonTuple],
    tau_teacher: float,
    normalize: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Teacher tuple probabilities as a padded `(T, K_max + 1)` matrix, with the tuple table."""
    _check_temperature("tau_teacher", tau_teacher)
    teacher = np.asarray(teacher_embeddings, dtype=np.float64)
    if normalize:
        teacher = l2_normalize_rows(teacher)
    anchors, columns, mask = _tuple_table(tuples)
    logits = np.where(mask, -distance_matrix(teacher)[anchors[:, None], columns] / tau_teacher, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    probs = np.where(mask, np.exp(logits), 0.0)
    return probs / probs.sum(axis=1, keepdims=True), anchors, columns, mask


def comparison_matching_loss(
    teacher_embeddings: ArrayLike,
    student_embeddings: Node,
    tuples: Sequence[ComparisonTuple] | MinedTuples,
    tau_teacher: float = 2.0,
    tau_student: float = 1.0,
    normalize: bool = True,
    per_anchor_mean: bool = False,
) -> Node:
    """Mean over tuples of KL(p(teacher) || p(student)).

    The teacher embeddings are constants. With `per_anchor_mean`, tuples are first averaged per
    anchor, then over anchors. An empty tuple list gives a constant zero flagged "empty-tuples".
    """
    _check_temperature("tau_student", tau_student)
    tuples = list(tuples)
    if not tuples:
        logger.debug("Comparison matching on an empty tuple list; the loss is 0.")
        return student_embeddings.tape.constant(0.0).with_flags(EMPTY_TUPLES)
    teacher_probs, anchors, columns, mask = teacher_tuple_targets(
        teacher_embeddings, tuples, tau_teacher, normalize
    )
    student = ops.row_l2_normalize(student_embeddings) if normalize else student_embeddings
    distances = ops.gather(ops.pairwise_distances(student), anchors, columns)
    per_tuple = ops.kl_rows_from_logits(teacher_probs, ops.scale(distances, -1.0), tau_student, mask)
    if per_anchor_mean:
        return ops.sum(ops.mul(per_tuple, _anchor_weights(anchors)))
    return ops.mean(per_tuple)


# ---- KL decompositions ----------------------------------------------------------------------


def kl_decomposition_k1(
    teacher_prob: ArrayLike, dist_pos: ArrayLike, dist_neg: ArrayLike
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Splits KL([p, 1 - p] || [s, 1 - s]), with s = sigmoid(dist_neg - dist_pos), into
    a rectification term (1 - p) * diff, the logistic loss ln(1 + exp(-diff)) and the teacher-only
    constant p ln p + (1 - p) ln(1 - p). Accepts scalars or arrays.

    >>> [float(np.round(v, 6)) for v in kl_decomposition_k1(0.5, 1.0, 1.0)]
    [0.0, 0.693147, -0.693147]
    """
    p = np.asarray(teacher_prob, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)):
        raise DomainError(f"teacher probability must lie in (0, 1), got {teacher_prob}")
    dist_pos = np.asarray(dist_pos, dtype=np.float64)
    dist_neg = np.asarray(dist_neg, dtype=np.float64)
    if np.any(dist_pos < 0) or np.any(dist_neg < 0):
        raise DomainError("distances must be non-negative")
    diff = dist_neg - dist_pos
    rectification = (1.0 - p) * diff
    logistic = np.logaddexp(0.0, -diff)
    constant = p * np.log(p) + (1.0 - p) * np.log1p(-p)
    return rectification, logistic, constant


def _check_simplex(teacher_probs: np.ndarray) -> None:
    if teacher_probs.ndim != 1 or teacher_probs.size < 2:
        raise DomainError(f"expected a (K + 1)-vector with K >= 1, got shape {teacher_probs.shape}")
    if np.any(teacher_probs < 0) or abs(teacher_probs.sum() - 1.0) > 1e-9:
        raise DomainError(f"teacher probabilities must lie on the simplex, got {teacher_probs}")


def kl_decomposition_multik(teacher_probs: ArrayLike, distances: ArrayLike) -> tuple[float, float]:
    """Splits KL(p_T || p) for one tuple (at temperature 1) into a rectification term and the
    multi-impostor contrastive loss ln(1 + sum_k exp(D(a, p) - D(a, n_k))).

    The rectification term is KL(p_T || p) - KL(e_0 || p), so the two terms add up to KL(p_T || p).
    """
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
    distances = np.asarray(distances, dtype=np.float64).reshape(-1)
    _check_simplex(teacher_probs)
    if distances.shape != teacher_probs.shape:
        raise ShapeMismatchError("kl_decomposition_multik", teacher_probs.shape, distances.shape)
    contrastive = float(np.logaddexp.reduce(distances[0] - distances))
    log_p = -distances - np.logaddexp.reduce(-distances)
    support = teacher_probs > 0
    kl = float(np.sum(teacher_probs[support] * (np.log(teacher_probs[support]) - log_p[support])))
    return kl - contrastive, contrastive


def kl_decomposition_multik_nodes(teacher_probs: ArrayLike, distances: Node) -> tuple[Node, Node]:
    """Differentiable form of `kl_decomposition_multik` over a `1 x (K + 1)` distance node."""
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
    _check_simplex(teacher_probs)
    logits = ops.scale(distances, -1.0)
    contrastive = ops.cross_entropy_rows(logits, np.array([0]))
    kl = ops.kl_rows_from_logits(teacher_probs.reshape(1, -1), logits, 1.0)
    return ops.sub(kl, contrastive), contrastive


# ---- debug dump -----------------------------------------------------------------------------


def save_tuples_csv(path: str | Path, tuples: Sequence[ComparisonTuple] | MinedTuples) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["anchor", "positive", "impostor_list"])
        for t in tuples:
            writer.writerow([t.anchor, t.positive, ";".join(str(i) for i in t.impostors)])
