"""Experiment drivers shared by the command line and the slow tests: data preparation, the
overlap sweep and the analysis studies. Nothing here writes files."""
from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from logging import getLogger
from typing import NamedTuple, Sequence

import numpy as np

from gkdistill.autodiff import Matrix
from gkdistill.cls_distill import NcmTeacher
from gkdistill.config import ExperimentConfig
from gkdistill.datagen import (
    LabeledDataset,
    SplitSpec,
    make_gaussian_clusters,
    restrict,
    sliding_window_split,
)
from gkdistill.errors import (
    DomainError,
    InvalidHyperparameterError,
    StageDegenerateError,
    StructuralError,
    TrainingDivergedError,
)
from gkdistill.evalkit import (
    GradientNormReport,
    IncrementalReport,
    WeightStudy,
    gradient_norm_study,
    joint_incremental_classifier,
    ncm_accuracy,
    nearest_neighbor_accuracy,
    rank_auc,
    weight_study,
)
from gkdistill.model import MlpModel
from gkdistill.trainer import (
    DISTILL_MODES,
    DistillMode,
    distill_embedding_stage,
    distill_student,
    initialize_student,
    train_cross_entropy,
    train_teacher,
)

logger = getLogger(__name__)

IMPOSTOR_CAPS = (1, 2, 4, 8, 0)
DEFAULT_SWEEP_MODES: tuple[DistillMode, ...] = ("vanilla", "refilled-minus", "refilled")


def select_classes(dataset: LabeledDataset, classes: Sequence[int]) -> LabeledDataset:
    """The instances of `classes` (original class ids), relabeled in the order of `classes`."""
    positions = {class_id: i for i, class_id in enumerate(dataset.class_ids)}
    missing = [c for c in classes if c not in positions]
    if missing:
        raise StructuralError(f"classes {missing} are not in the dataset")
    columns = np.array([positions[c] for c in classes], dtype=np.intp)
    mask = np.isin(dataset.labels, columns)
    relabel = np.full(dataset.class_count, -1)
    relabel[columns] = np.arange(len(columns))
    return LabeledDataset(
        Matrix(dataset.x[mask]), relabel[dataset.labels[mask]], len(columns), tuple(int(c) for c in classes)
    )


@dataclass(frozen=True)
class ExperimentData:
    """The clusters of a run, their class split and the train/test sets of both models.

    Every instance is assigned to train or test once, so the teacher never trains on an instance
    the student is tested on.
    """

    dataset: LabeledDataset
    split: SplitSpec
    teacher_train: LabeledDataset
    teacher_test: LabeledDataset
    student_train: LabeledDataset
    student_test: LabeledDataset

    @classmethod
    def prepare(cls, config: ExperimentConfig, overlap_ratio: float | None = None) -> ExperimentData:
        ds = config.dataset
        dataset = make_gaussian_clusters(
            ds.classes, ds.dim, ds.per_class, ds.center_scale, ds.sigma, ds.seed, ds.informative_dim
        )
        ratio = config.split.overlap_ratio if overlap_ratio is None else overlap_ratio
        split = sliding_window_split(ds.classes, config.split.window, ratio, config.split.resolved_teacher_window)
        full = restrict(dataset, list(range(ds.classes)), config.split.train_fraction, seed=ds.seed)
        return cls(
            dataset,
            split,
            select_classes(full.train, split.teacher_classes),
            select_classes(full.test, split.teacher_classes),
            select_classes(full.train, split.student_classes),
            select_classes(full.test, split.student_classes),
        )

    def check_teacher(self, teacher: MlpModel) -> None:
        if teacher.class_ids != self.split.teacher_classes:
            raise StructuralError(
                f"the teacher was trained on classes {list(teacher.class_ids)}, but the config puts "
                f"{list(self.split.teacher_classes)} in the teacher window"
            )


def fit_teacher(config: ExperimentConfig, data: ExperimentData) -> MlpModel:
    teacher, _ = train_teacher(data.teacher_train, data.teacher_test, config.model, config.optim, config.seed)
    return teacher


# ---- overlap sweep --------------------------------------------------------------------------


class SweepRow(NamedTuple):
    ratio: float
    seed: int
    mode: str
    accuracy: float


def sweep_job(config: ExperimentConfig, ratio: float, seed: int, modes: Sequence[str]) -> list[SweepRow]:
    """One (ratio, seed) cell of the sweep: a fresh teacher, then one student per mode.

    A mode whose training fails on this cell is logged and recorded with a NaN accuracy.
    """
    config = config.with_seed(seed)
    data = ExperimentData.prepare(config, ratio)
    teacher = fit_teacher(config, data)
    rows = []
    for mode in modes:
        try:
            result = distill_student(
                mode,  # type: ignore[arg-type]
                teacher,
                data.student_train,
                data.student_test,
                config.model,
                config.optim,
                config.distill,
                seed,
            )
        except (DomainError, StageDegenerateError, TrainingDivergedError) as e:
            logger.warning(f"Sweep: ratio={ratio:g} seed={seed} mode={mode} failed: {e}")
            rows.append(SweepRow(data.split.overlap_ratio, seed, mode, float("nan")))
            continue
        rows.append(SweepRow(data.split.overlap_ratio, seed, mode, result.test_accuracy))
        logger.info(f"Sweep: ratio={ratio:g} seed={seed} mode={mode}: accuracy {result.test_accuracy:.4f}")
    return rows


def run_sweep(
    config: ExperimentConfig,
    ratios: Sequence[float] = (),
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    modes: Sequence[str] = DEFAULT_SWEEP_MODES,
    jobs: int = 1,
) -> list[SweepRow]:
    """Runs every (ratio, seed) cell, in `jobs` worker processes when `jobs > 1`. Without `ratios`,
    the config's `split.sweep_ratios` are used.

    Rows are sorted by (ratio, seed, mode), whatever order the workers finish in.
    """
    unknown = [m for m in modes if m not in DISTILL_MODES]
    if unknown:
        raise InvalidHyperparameterError("modes", unknown, f"must be among {DISTILL_MODES}")
    if jobs < 1:
        raise InvalidHyperparameterError("jobs", jobs, "must be >= 1")
    ratios = list(ratios) or list(config.split.sweep_ratios)
    # Fail on an unattainable ratio before any training starts.
    for ratio in ratios:
        sliding_window_split(
            config.dataset.classes, config.split.window, ratio, config.split.resolved_teacher_window
        )
    cells = [(ratio, seed) for ratio in ratios for seed in seeds]
    rows: list[SweepRow] = []
    if jobs == 1:
        for ratio, seed in cells:
            rows.extend(sweep_job(config, ratio, seed, modes))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            futures = [executor.submit(sweep_job, config, ratio, seed, list(modes)) for ratio, seed in cells]
            for future in futures:
                rows.extend(future.result())
    return sorted(rows, key=lambda row: (row.ratio, row.seed, row.mode))


# ---- analysis studies -----------------------------------------------------------------------


def gradient_norms(
    config: ExperimentConfig, teacher: MlpModel, data: ExperimentData, grid: Sequence[int] = ()
) -> GradientNormReport:
    """Head-gradient differences on the teacher's classes; the default grid is 2, 4, ... up to the
    teacher's class count."""
    dataset = data.teacher_train
    grid = list(grid) or list(range(2, dataset.class_count + 1, 2))
    model = config.model

    def student_factory(class_count: int, seed: int) -> MlpModel:
        return MlpModel.initialize(dataset.dim, model.student_widths, model.student_embed_dim, class_count, seed)

    return gradient_norm_study(
        dataset,
        teacher,
        student_factory,
        grid,
        config.optim.classes_per_batch,
        config.optim.instances_per_class,
        tau_teacher=config.distill.kd_temperature,
        tau_student=config.distill.tau_student,
        lam=config.distill.study_lambda,
        seed=config.seed,
    )


class WeightAuc(NamedTuple):
    study: WeightStudy
    shuffled_auc: float


def weight_auc(config: ExperimentConfig, teacher: MlpModel, data: ExperimentData) -> WeightAuc:
    """Pseudo-label weights of the student's training instances, flagged seen when their class is
    one of the teacher's. The shuffled-flag AUC is the chance baseline."""
    distill = config.distill
    ncm = NcmTeacher.build(teacher, data.student_train, distill.normalize_embeddings, distill.ncm_temperature)
    class_ids = np.asarray(data.student_train.class_ids)[data.student_train.labels]
    seen = np.isin(class_ids, data.split.teacher_classes)
    study = weight_study(ncm, data.student_train.x, seen, config.distill.study_lambda)
    shuffled = np.random.default_rng(config.seed).permutation(seen)
    return WeightAuc(study, rank_auc(study.weights, shuffled))


def ncm_quality(
    config: ExperimentConfig, teacher: MlpModel, data: ExperimentData, student: MlpModel | None = None
) -> list[tuple[str, float]]:
    """NCM accuracy on the student's classes of the teacher embedding (plus its 1-NN accuracy), a
    vanilla student, a student after the embedding stage and, when given, `student`."""
    train, test = data.student_train, data.student_test
    rows = [
        ("teacher-ncm", ncm_accuracy(teacher.embed, train, test)),
        ("teacher-1nn", nearest_neighbor_accuracy(teacher.embed, train, test)),
    ]
    vanilla, _ = train_cross_entropy(
        initialize_student(train, config.model, config.seed), train, test, config.optim, config.seed + 2
    )
    rows.append(("vanilla", ncm_accuracy(vanilla.embed, train, test)))
    stage1, _ = distill_embedding_stage(
        initialize_student(train, config.model, config.seed),
        teacher,
        train,
        config.optim,
        config.distill,
        config.seed + 1,
    )
    rows.append(("stage1", ncm_accuracy(stage1.embed, train, test)))
    if student is not None:
        rows.append(("student", ncm_accuracy(student.embed, train, test)))
    return rows


def incremental(
    config: ExperimentConfig, teacher: MlpModel, data: ExperimentData, student: MlpModel | None = None
) -> list[IncrementalReport]:
    """Joint classifier over the union of both label spaces. Without `student`, a refilled student
    is trained first. The student-embedding mode is reported when both embeddings have the same size."""
    if student is None:
        student = distill_student(
            "refilled",
            teacher,
            data.student_train,
            data.student_test,
            config.model,
            config.optim,
            config.distill,
            config.seed,
        ).student
    modes = ["own-embedding"]
    if student.embed_dim == teacher.embed_dim:
        modes.append("student-embedding")
    reports = []
    for mode in modes:
        _, report = joint_incremental_classifier(
            student, teacher, data.teacher_test, data.student_test, mode  # type: ignore[arg-type]
        )
        reports.append(report)
    return reports


def impostor_caps(
    config: ExperimentConfig, teacher: MlpModel, data: ExperimentData, caps: Sequence[int] = IMPOSTOR_CAPS
) -> list[tuple[int, float]]:
    """NCM accuracy after the embedding stage for every cap on the impostors per tuple (0 = none)."""
    rows = []
    for cap in caps:
        distill = dataclasses.replace(config.distill, max_impostors=cap)
        student = initialize_student(data.student_train, config.model, config.seed)
        student, _ = distill_embedding_stage(student, teacher, data.student_train, config.optim, distill, config.seed + 1)
        rows.append((cap, ncm_accuracy(student.embed, data.student_train, data.student_test)))
        logger.info(f"Impostor cap {cap or 'unbounded'}: NCM accuracy {rows[-1][1]:.4f}")
    return rows
