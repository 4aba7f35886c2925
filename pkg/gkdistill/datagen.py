"""Synthetic datasets, the sliding-window class splits and class-balanced mini-batches."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from numpy.typing import ArrayLike

from gkdistill.autodiff import Matrix
from gkdistill.errors import (
    InvalidBatchConfigError,
    InvalidConfigError,
    InvalidRatioError,
    InvalidSplitError,
)

logger = getLogger(__name__)


@dataclass(frozen=True)
class LabeledDataset:
    """An `N x D` instance matrix with integer labels in `[0, class_count)`.

    `class_ids[c]` is the original id of the class with label `c`, which lets evaluation code map
    re-indexed labels back to the universe they were carved from.

    Every class has at least 2 instances, except in the empty dataset (N = 0), which consumers
    reject with `EmptyDatasetError`.
    """

    instances: Matrix
    labels: np.ndarray
    class_count: int
    class_ids: tuple[int, ...] = ()

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        if not self.class_ids:
            object.__setattr__(self, "class_ids", tuple(range(self.class_count)))
        if len(self.class_ids) != self.class_count:
            raise InvalidConfigError(
                f"{len(self.class_ids)} class ids for a dataset with {self.class_count} classes"
            )
        if labels.shape[0] != self.instances.rows:
            raise InvalidConfigError(
                f"{labels.shape[0]} labels for a dataset with {self.instances.rows} instances"
            )
        if labels.size == 0:
            return
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise InvalidConfigError(f"labels must lie in [0, {self.class_count})")
        counts = self.class_sizes()
        if counts.min() < 2:
            sparse = int(np.argmin(counts))
            raise InvalidConfigError(
                f"class {self.class_ids[sparse]} has {counts[sparse]} instance(s); at least 2 are needed"
            )

    def __len__(self) -> int:
        return self.instances.rows

    @property
    def dim(self) -> int:
        return self.instances.cols

    @property
    def x(self) -> np.ndarray:
        return self.instances.values

    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def take(self, indices: ArrayLike) -> Batch:
        indices = np.asarray(indices, dtype=np.intp)
        return Batch(self.x[indices], self.labels[indices], indices)


class Batch(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    # Row indices of the batch in its dataset.
    indices: np.ndarray


class SplitSpec(NamedTuple):
    teacher_classes: tuple[int, ...]
    student_classes: tuple[int, ...]
    overlap_ratio: float

    @property
    def shared_classes(self) -> tuple[int, ...]:
        teacher = set(self.teacher_classes)
        return tuple(c for c in self.student_classes if c in teacher)


class Restriction(NamedTuple):
    """Result of `restrict`: the two splits, the re-index map and the original instance indices."""

    train: LabeledDataset
    test: LabeledDataset
    # class_map[new_label] = original class id
    class_map: tuple[int, ...]
    train_indices: np.ndarray
    test_indices: np.ndarray


def make_gaussian_clusters(
    class_count: int,
    dim: int,
    per_class: int,
    center_scale: float = 1.0,
    noise_sigma: float = 1.3,
    seed: int = 0,
    informative_dim: int = 0,
) -> LabeledDataset:
    """Isotropic Gaussian clusters around random class centers, `per_class` instances each.

    With `informative_dim = k > 0`, the centers lie in a random k-dimensional subspace shared by
    all classes (scaled to keep the expected center norm of the full-dimensional case).
    Instances are ordered by class.

    >>> data = make_gaussian_clusters(3, 4, 5, seed=1)
    >>> data.x.shape, data.class_sizes().tolist()
    ((15, 4), [5, 5, 5])
    """
    if class_count < 2:
        raise InvalidConfigError(f"class_count must be >= 2, got {class_count}")
    if per_class < 2:
        raise InvalidConfigError(f"per_class must be >= 2 (tuple mining needs a positive), got {per_class}")
    if not noise_sigma > 0:
        raise InvalidConfigError(f"noise_sigma must be > 0, got {noise_sigma}")
    if not 0 <= informative_dim <= dim:
        raise InvalidConfigError(f"informative_dim must lie in [0, {dim}], got {informative_dim}")

    rng = np.random.default_rng(seed)
    if informative_dim == 0:
        centers = rng.normal(0.0, center_scale, size=(class_count, dim))
    else:
        basis, _ = np.linalg.qr(rng.normal(size=(dim, informative_dim)))
        coords = rng.normal(0.0, center_scale * np.sqrt(dim / informative_dim), size=(class_count, informative_dim))
        centers = coords @ basis.T
    labels = np.repeat(np.arange(class_count), per_class)
    noise = rng.normal(0.0, noise_sigma, size=(class_count * per_class, dim))
    return LabeledDataset(Matrix(centers[labels] + noise), labels, class_count)


def attainable_ratios(
    total_classes: int, window: int, teacher_window: int | None = None
) -> tuple[float, ...]:
    teacher_window = window if teacher_window is None else teacher_window
    ratios = []
    for shared in range(min(window, teacher_window) + 1):
        start = teacher_window - shared
        if start + window <= total_classes:
            ratios.append(shared / window)
    return tuple(ratios)


def sliding_window_split(
    total_classes: int, window: int, overlap_ratio: float, teacher_window: int | None = None
) -> SplitSpec:
    """Teacher classes are `[0, teacher_window)`; the student window slides to share exactly
    `overlap_ratio * window` of them.

    >>> sliding_window_split(20, 10, 0.5).student_classes
    (5, 6, 7, 8, 9, 10, 11, 12, 13, 14)
    """
    teacher_window = window if teacher_window is None else teacher_window
    if window < 1 or teacher_window < 1:
        raise InvalidSplitError(f"windows must be positive, got {window} and {teacher_window}")
    if teacher_window > total_classes:
        raise InvalidSplitError(f"teacher window {teacher_window} exceeds {total_classes} classes")
    attainable = attainable_ratios(total_classes, window, teacher_window)

    shared_exact = overlap_ratio * window
    shared = int(round(shared_exact))
    if not 0 <= overlap_ratio <= 1 or abs(shared - shared_exact) > 1e-9 or shared > teacher_window:
        raise InvalidRatioError(overlap_ratio, attainable)
    start = teacher_window - shared
    if start + window > total_classes:
        raise InvalidRatioError(overlap_ratio, attainable)

    split = SplitSpec(
        teacher_classes=tuple(range(teacher_window)),
        student_classes=tuple(range(start, start + window)),
        overlap_ratio=shared / window,
    )
    logger.debug(f"Sliding-window split: {split}")
    return split


def restrict(
    dataset: LabeledDataset, class_list: Sequence[int], train_fraction: float, seed: int
) -> Restriction:
    """Stratified train/test split of the instances of `class_list`.

    Labels are re-indexed to `[0, len(class_list))` in the order of `class_list`; every class keeps
    `round(train_fraction * n)` instances for training.
    """
    if not 0 < train_fraction < 1:
        raise InvalidSplitError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(set(class_list)) != len(class_list):
        raise InvalidSplitError(f"duplicate class ids in {list(class_list)}")
    rng = np.random.default_rng(seed)
    train_parts, test_parts = [], []
    for class_id in class_list:
        if not 0 <= class_id < dataset.class_count:
            raise InvalidSplitError(f"class {class_id} is not a class of the dataset")
        members = np.flatnonzero(dataset.labels == class_id)
        n_train = int(np.floor(train_fraction * len(members) + 0.5))
        if n_train < 2 or len(members) - n_train < 2:
            raise InvalidSplitError(
                f"class {class_id}: {n_train} train / {len(members) - n_train} test instances "
                f"(at least 2 of each are needed)"
            )
        shuffled = rng.permutation(members)
        train_parts.append(np.sort(shuffled[:n_train]))
        test_parts.append(np.sort(shuffled[n_train:]))

    class_map = tuple(dataset.class_ids[c] for c in class_list)

    def build(parts: list[np.ndarray]) -> tuple[LabeledDataset, np.ndarray]:
        indices = np.concatenate(parts)
        labels = np.concatenate([np.full(len(p), new) for new, p in enumerate(parts)])
        return LabeledDataset(Matrix(dataset.x[indices]), labels, len(class_list), class_map), indices

    train, train_indices = build(train_parts)
    test, test_indices = build(test_parts)
    return Restriction(train, test, class_map, train_indices, test_indices)


def sample_balanced_batch(
    dataset: LabeledDataset,
    classes_per_batch: int,
    instances_per_class: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draws `classes_per_batch` distinct classes, then `instances_per_class` distinct instances
    of each. Only classes with at least `instances_per_class` instances are eligible.
    """
    if instances_per_class < 2:
        raise InvalidBatchConfigError(
            f"instances_per_class must be >= 2 so that every class has a positive pair, got {instances_per_class}"
        )
    if classes_per_batch < 1:
        raise InvalidBatchConfigError(f"classes_per_batch must be >= 1, got {classes_per_batch}")
    eligible = np.flatnonzero(dataset.class_sizes() >= instances_per_class)
    if len(eligible) < classes_per_batch:
        raise InvalidBatchConfigError(
            f"{classes_per_batch} classes with {instances_per_class} instances each were requested, "
            f"but only {len(eligible)} classes are large enough"
        )
    classes = np.sort(rng.choice(eligible, size=classes_per_batch, replace=False))
    batch = [
        rng.choice(np.flatnonzero(dataset.labels == c), size=instances_per_class, replace=False)
        for c in classes
    ]
    return np.concatenate(batch)


def balanced_batch_count(dataset: LabeledDataset, batch_size: int) -> int:
    """Number of balanced batches that make up one epoch (at least one)."""
    return max(1, len(dataset) // batch_size)


# ---- files ----------------------------------------------------------------------------------


def save_dataset_csv(path: str | Path, dataset: LabeledDataset) -> None:
    table = np.column_stack([dataset.labels.astype(np.float64), dataset.x])
    fmt = ["%d"] + ["%.17g"] * dataset.dim
    np.savetxt(path, table, fmt=fmt, delimiter=",", header=f"label,dim={dataset.dim}", comments="")


def load_dataset_csv(path: str | Path, class_count: int | None = None) -> LabeledDataset:
    path = Path(path)
    with open(path) as f:
        header = f.readline().strip()
        try:
            column, dim_field = header.split(",")
            dim = int(dim_field.removeprefix("dim="))
        except ValueError:
            raise InvalidConfigError(f"{path}: expected a 'label,dim=D' header, got {header!r}") from None
        if column != "label" or not dim_field.startswith("dim="):
            raise InvalidConfigError(f"{path}: expected a 'label,dim=D' header, got {header!r}")
        table = np.loadtxt(f, delimiter=",", dtype=np.float64, ndmin=2)
    if table.size == 0:
        table = np.zeros((0, dim + 1))
    if table.shape[1] != dim + 1:
        raise InvalidConfigError(f"{path}: rows have {table.shape[1] - 1} features, header says {dim}")
    labels = table[:, 0].astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 0
    return LabeledDataset(Matrix(table[:, 1:]), labels, class_count)


def save_split_csv(path: str | Path, split: SplitSpec) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["role", "class_id"])
        writer.writerows(("teacher", c) for c in split.teacher_classes)
        writer.writerows(("student", c) for c in split.student_classes)


def load_split_csv(path: str | Path) -> SplitSpec:
    roles: dict[str, list[int]] = {"teacher": [], "student": []}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            roles[row["role"]].append(int(row["class_id"]))
    teacher, student = tuple(roles["teacher"]), tuple(roles["student"])
    shared = len(set(teacher) & set(student))
    return SplitSpec(teacher, student, shared / len(student) if student else 0.0)
