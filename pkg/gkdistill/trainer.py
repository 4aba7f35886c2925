"""Training loops: teacher pre-training, the two distillation stages, one-stage training and the
baselines the distillation modes are compared with.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Callable, Iterator, Literal, Mapping, Sequence

import numpy as np

from gkdistill.autodiff import Matrix, Node, ParamGraph, grad, ops
from gkdistill.cls_distill import (
    NcmTeacher,
    WeightMode,
    cross_entropy_objective,
    refilled_objective,
    shared_teacher_columns,
    standard_kd_loss,
)
from gkdistill.config import DistillConfig, ModelConfig, OptimConfig
from gkdistill.datagen import Batch, LabeledDataset, balanced_batch_count, sample_balanced_batch
from gkdistill.embed_distill import (
    EMPTY_TUPLES,
    MinedTuples,
    comparison_matching_loss,
    l2_normalize_rows,
    mine_semihard_tuples,
    save_tuples_csv,
)
from gkdistill.errors import (
    InvalidHyperparameterError,
    NumericOverflowError,
    ShapeMismatchError,
    StageDegenerateError,
    TrainingDivergedError,
)
from gkdistill.evalkit import accuracy
from gkdistill.model import MlpModel

logger = getLogger(__name__)

DistillMode = Literal["vanilla", "kd", "refilled", "refilled-minus", "refilled-emb", "refilled-lkd", "one-stage"]
DISTILL_MODES: tuple[DistillMode, ...] = (
    "vanilla",
    "kd",
    "refilled",
    "refilled-minus",
    "refilled-emb",
    "refilled-lkd",
    "one-stage",
)


@dataclass
class SgdState:
    """SGD with (heavy-ball) momentum: v <- momentum * v + g, then p <- p - lr * v.

    `schedule` holds (epoch, multiplier) pairs: from epoch `e` on (0-based), the learning rate is
    the initial one times every multiplier whose epoch is <= e.
    """

    learning_rate: float
    momentum: float
    velocity: dict[str, np.ndarray]
    schedule: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidHyperparameterError("learning_rate", self.learning_rate, "must be > 0")
        if not 0 <= self.momentum < 1:
            raise InvalidHyperparameterError("momentum", self.momentum, "must lie in [0, 1)")
        if any(multiplier <= 0 for _, multiplier in self.schedule):
            raise InvalidHyperparameterError("schedule", self.schedule, "multipliers must be > 0")

    @classmethod
    def create(
        cls,
        parameters: Mapping[str, Matrix],
        learning_rate: float,
        momentum: float = 0.0,
        schedule: Sequence[tuple[int, float]] = (),
    ) -> SgdState:
        velocity = {name: np.zeros(value.shape) for name, value in parameters.items()}
        return cls(learning_rate, momentum, velocity, tuple(schedule))

    def learning_rate_at(self, epoch: int) -> float:
        rate = self.learning_rate
        for trigger, multiplier in self.schedule:
            if trigger <= epoch:
                rate *= multiplier
        return rate

    def step(
        self, parameters: Mapping[str, Matrix], gradients: Mapping[str, np.ndarray], epoch: int
    ) -> dict[str, Matrix]:
        """Returns the updated parameters named in `gradients`."""
        rate = self.learning_rate_at(epoch)
        updated = {}
        for name, gradient in gradients.items():
            if gradient.shape != self.velocity[name].shape:
                raise ShapeMismatchError(f"SGD step on '{name}'", gradient.shape, self.velocity[name].shape)
            self.velocity[name] = self.momentum * self.velocity[name] + gradient
            updated[name] = Matrix(parameters[name].values - rate * self.velocity[name])
        return updated


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    stage: str
    loss: float
    train_acc: float
    test_acc: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    COLUMNS = ("epoch", "stage", "loss", "train_acc", "test_acc", "seconds")

    def append(self, record: EpochRecord) -> None:
        same_stage = [r.epoch for r in self.records if r.stage == record.stage]
        if same_stage and record.epoch <= same_stage[-1]:
            raise ValueError(f"epoch {record.epoch} of stage '{record.stage}' is out of order")
        self.records.append(record)

    def extend(self, other: TrainLog) -> TrainLog:
        for record in other.records:
            self.append(record)
        return self

    def stage(self, name: str) -> list[EpochRecord]:
        return [r for r in self.records if r.stage == name]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.COLUMNS)
            for r in self.records:
                writer.writerow(
                    [r.epoch, r.stage, repr(r.loss), repr(r.train_acc), repr(r.test_acc), f"{r.seconds:.3f}"]
                )


# ---- the generic loop -----------------------------------------------------------------------

BatchStream = Callable[[np.random.Generator], Iterator[Batch]]
LossBuilder = Callable[[ParamGraph, MlpModel, Batch, int], Node]


def permutation_batches(dataset: LabeledDataset, batch_size: int) -> BatchStream:
    def stream(rng: np.random.Generator) -> Iterator[Batch]:
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), batch_size):
            yield dataset.take(order[start : start + batch_size])

    return stream


def balanced_batches(dataset: LabeledDataset, optim: OptimConfig) -> BatchStream:
    classes_per_batch = min(optim.classes_per_batch, dataset.class_count)

    def stream(rng: np.random.Generator) -> Iterator[Batch]:
        for _ in range(balanced_batch_count(dataset, optim.batch_size)):
            yield dataset.take(
                sample_balanced_batch(dataset, classes_per_batch, optim.instances_per_class, rng)
            )

    return stream


def _is_skipped(loss: Node) -> bool:
    return EMPTY_TUPLES in loss.flags


def run_stage(
    stage: str,
    model: MlpModel,
    train: LabeledDataset,
    test: LabeledDataset | None,
    optim: OptimConfig,
    seed: int,
    batches: BatchStream,
    build_loss: LossBuilder,
    trainable: Sequence[str] | None = None,
    require_progress: bool = False,
) -> tuple[MlpModel, TrainLog]:
    """Runs `optim.epochs` epochs of SGD on the loss built for every batch.

    Only the parameters in `trainable` (all by default) are updated. Batches whose loss is flagged
    "empty-tuples" are skipped; with `require_progress`, an epoch in which every batch was skipped
    raises `StageDegenerateError`. Non-finite values raise `TrainingDivergedError`.
    """
    names = list(model.parameters) if trainable is None else list(trainable)
    state = SgdState.create(
        {name: model.parameters[name] for name in names}, optim.lr, optim.momentum, optim.schedule
    )
    rng = np.random.default_rng(seed)
    log = TrainLog()
    for epoch in range(optim.epochs):
        start = time.perf_counter()
        losses: list[float] = []
        skipped = 0
        try:
            for batch in batches(rng):
                graph = model.graph()
                loss = build_loss(graph, model, batch, epoch)
                if _is_skipped(loss):
                    skipped += 1
                    continue
                gradients = grad(loss, graph)
                model = model.with_parameters(
                    state.step(model.parameters, {name: gradients[name] for name in names}, epoch)
                )
                losses.append(loss.item())
        except NumericOverflowError as e:
            raise TrainingDivergedError(stage, epoch + 1, e) from e

        if skipped:
            logger.warning(f"[{stage}] epoch {epoch + 1}: skipped {skipped} batch(es) without tuples.")
        if not losses:
            if require_progress:
                raise StageDegenerateError(
                    f"stage '{stage}', epoch {epoch + 1}: no batch produced a comparison tuple"
                )
            mean_loss = 0.0
        else:
            mean_loss = float(np.mean(losses))
        record = EpochRecord(
            epoch=epoch + 1,
            stage=stage,
            loss=mean_loss,
            train_acc=accuracy(model, train),
            test_acc=accuracy(model, test) if test is not None and len(test) else float("nan"),
            seconds=time.perf_counter() - start,
        )
        log.append(record)
        logger.info(
            f"[{stage}] epoch {record.epoch}/{optim.epochs}: loss={record.loss:.4f} "
            f"train_acc={record.train_acc:.4f} test_acc={record.test_acc:.4f}"
        )
    return model, log


# ---- teacher and baselines ------------------------------------------------------------------


def _cross_entropy_loss(graph: ParamGraph, model: MlpModel, batch: Batch, epoch: int) -> Node:
    return cross_entropy_objective(graph, model, batch)


def initialize_student(train: LabeledDataset, model_config: ModelConfig, seed: int) -> MlpModel:
    return MlpModel.initialize(
        train.dim,
        model_config.student_widths,
        model_config.student_embed_dim,
        train.class_count,
        seed,
        class_ids=train.class_ids,
    )


def train_cross_entropy(
    model: MlpModel,
    train: LabeledDataset,
    test: LabeledDataset | None,
    optim: OptimConfig,
    seed: int,
    stage: str = "vanilla",
) -> tuple[MlpModel, TrainLog]:
    """Plain cross-entropy training on shuffled mini-batches."""
    return run_stage(
        stage, model, train, test, optim, seed, permutation_batches(train, optim.batch_size), _cross_entropy_loss
    )


def train_teacher(
    train: LabeledDataset,
    test: LabeledDataset | None,
    model_config: ModelConfig,
    optim: OptimConfig,
    seed: int,
) -> tuple[MlpModel, TrainLog]:
    """Trains a teacher with cross-entropy and returns it frozen."""
    teacher = MlpModel.initialize(
        train.dim,
        model_config.teacher_widths,
        model_config.teacher_embed_dim,
        train.class_count,
        seed,
        class_ids=train.class_ids,
    )
    teacher, log = train_cross_entropy(teacher, train, test, optim, seed + 1, stage="teacher")
    return teacher.freeze(), log


def train_standard_kd(
    student: MlpModel,
    teacher: MlpModel,
    train: LabeledDataset,
    test: LabeledDataset | None,
    optim: OptimConfig,
    distill: DistillConfig,
    seed: int,
) -> tuple[MlpModel, TrainLog]:
    """Cross-entropy plus KD towards the teacher's logits of the student's classes."""
    columns = shared_teacher_columns(teacher.class_ids, student.class_ids)

    def build_loss(graph: ParamGraph, model: MlpModel, batch: Batch, epoch: int) -> Node:
        logits = model.logits_node(graph, model.embed_node(graph, batch.x))
        teacher_logits = teacher.logits(batch.x)[:, columns]
        return standard_kd_loss(
            logits, teacher_logits, batch.y, distill.kd_weight, distill.kd_temperature, distill.tau_student
        )

    return run_stage("kd", student, train, test, optim, seed, permutation_batches(train, optim.batch_size), build_loss)


# ---- distillation stages --------------------------------------------------------------------


def _mine(student_embeddings: Node, batch: Batch, distill: DistillConfig) -> MinedTuples:
    values = student_embeddings.value
    if distill.normalize_embeddings:
        values = l2_normalize_rows(values)
    return mine_semihard_tuples(values, batch.y, distill.max_impostors or None)


def _comparison_loss(
    teacher: MlpModel, student_embeddings: Node, batch: Batch, distill: DistillConfig
) -> tuple[Node, MinedTuples]:
    mined = _mine(student_embeddings, batch, distill)
    loss = comparison_matching_loss(
        teacher.embed(batch.x),
        student_embeddings,
        mined,
        distill.tau_teacher,
        distill.tau_student,
        normalize=distill.normalize_embeddings,
        per_anchor_mean=distill.per_anchor_mean,
    )
    return loss, mined


def distill_embedding_stage(
    student: MlpModel,
    teacher: MlpModel,
    train: LabeledDataset,
    optim: OptimConfig,
    distill: DistillConfig,
    seed: int,
    test: LabeledDataset | None = None,
    tuple_dump_dir: Path | None = None,
) -> tuple[MlpModel, TrainLog]:
    """Trains the student embedding (never the head) to match the teacher's tuple probabilities.

    Tuples are mined on the current student embedding of every balanced batch. With
    `tuple_dump_dir`, the tuples of the first batch of every epoch are written there.
    """
    dumped: set[int] = set()

    def build_loss(graph: ParamGraph, model: MlpModel, batch: Batch, epoch: int) -> Node:
        embeddings = model.embed_node(graph, batch.x)
        loss, mined = _comparison_loss(teacher, embeddings, batch, distill)
        if tuple_dump_dir is not None and epoch not in dumped:
            dumped.add(epoch)
            save_tuples_csv(tuple_dump_dir / f"tuples_epoch{epoch + 1:03d}.csv", mined)
        return loss

    if tuple_dump_dir is not None:
        tuple_dump_dir.mkdir(parents=True, exist_ok=True)
    return run_stage(
        "embedding",
        student,
        train,
        test,
        optim,
        seed,
        balanced_batches(train, optim),
        build_loss,
        trainable=student.embedding_parameter_names,
        require_progress=True,
    )


def distill_classifier_stage(
    student: MlpModel,
    teacher: NcmTeacher,
    train: LabeledDataset,
    optim: OptimConfig,
    distill: DistillConfig,
    seed: int,
    test: LabeledDataset | None = None,
    weight_mode: WeightMode | None = None,
    lam: float | None = None,
) -> tuple[MlpModel, TrainLog]:
    """Trains the whole student (the head only with `optim.freeze_embedding`) on
    cross-entropy plus weighted local KD towards the teacher's NCM classifier."""
    weight_mode = weight_mode or distill.weight_mode  # type: ignore[assignment]
    lam = distill.lam if lam is None else lam

    def build_loss(graph: ParamGraph, model: MlpModel, batch: Batch, epoch: int) -> Node:
        return refilled_objective(graph, model, batch, teacher, lam, distill.tau_student, weight_mode)

    trainable = None
    if optim.freeze_embedding:
        trainable = [name for name in student.parameters if name not in student.embedding_parameter_names]
    return run_stage(
        "classifier", student, train, test, optim, seed, balanced_batches(train, optim), build_loss, trainable
    )


def train_one_stage_gamma(
    student: MlpModel,
    teacher: MlpModel | NcmTeacher,
    train: LabeledDataset,
    gamma: float,
    optim: OptimConfig,
    distill: DistillConfig,
    seed: int,
    test: LabeledDataset | None = None,
) -> tuple[MlpModel, TrainLog]:
    """Jointly minimizes CE + lambda_i * local KD + gamma * comparison matching.

    With gamma = 0 this follows exactly the batches and updates of `distill_classifier_stage`.
    """
    if gamma < 0:
        raise InvalidHyperparameterError("gamma", gamma, "must be >= 0")
    if isinstance(teacher, NcmTeacher):
        ncm = teacher
    else:
        ncm = NcmTeacher.build(teacher, train, distill.normalize_embeddings, distill.ncm_temperature)

    def build_loss(graph: ParamGraph, model: MlpModel, batch: Batch, epoch: int) -> Node:
        embeddings = model.embed_node(graph, batch.x)
        loss = refilled_objective(
            graph, model, batch, ncm, distill.lam, distill.tau_student, distill.weight_mode, embedding=embeddings
        )
        if gamma == 0:
            return loss
        comparison, _ = _comparison_loss(ncm.teacher, embeddings, batch, distill)
        if _is_skipped(comparison):
            return loss
        return ops.add(loss, ops.scale(comparison, gamma))

    return run_stage("one-stage", student, train, test, optim, seed, balanced_batches(train, optim), build_loss)


# ---- distillation modes ---------------------------------------------------------------------


@dataclass
class DistillResult:
    mode: str
    student: MlpModel
    log: TrainLog
    test_accuracy: float
    # Student after the embedding stage, for the modes that have one.
    embedding_student: MlpModel | None = None


def distill_student(
    mode: DistillMode,
    teacher: MlpModel,
    train: LabeledDataset,
    test: LabeledDataset,
    model_config: ModelConfig,
    optim: OptimConfig,
    distill: DistillConfig,
    seed: int,
    tuple_dump_dir: Path | None = None,
) -> DistillResult:
    """Trains a student on (train, test) with one of the distillation modes.

    Every mode starts from the same initialization for a given seed. The embedding and
    classifier stages draw their batches from seeds `seed + 1` and `seed + 2`.
    """
    if mode not in DISTILL_MODES:
        raise InvalidHyperparameterError("mode", mode, f"must be one of {DISTILL_MODES}")
    student = initialize_student(train, model_config, seed)
    log = TrainLog()
    embedding_student = None
    logger.info(f"Distilling a student with mode '{mode}' ({train.class_count} classes, seed {seed}).")

    if mode == "vanilla":
        student, stage_log = train_cross_entropy(student, train, test, optim, seed + 2)
        log.extend(stage_log)
    elif mode == "kd":
        student, stage_log = train_standard_kd(student, teacher, train, test, optim, distill, seed + 2)
        log.extend(stage_log)
    elif mode == "one-stage":
        student, stage_log = train_one_stage_gamma(student, teacher, train, distill.gamma, optim, distill, seed + 2, test)
        log.extend(stage_log)
    else:
        if mode != "refilled-lkd":
            student, stage_log = distill_embedding_stage(
                student, teacher, train, optim, distill, seed + 1, test, tuple_dump_dir
            )
            log.extend(stage_log)
            embedding_student = student
        ncm = NcmTeacher.build(teacher, train, distill.normalize_embeddings, distill.ncm_temperature)
        weight_mode = "none" if mode == "refilled-minus" else distill.weight_mode
        lam = 0.0 if mode == "refilled-emb" else distill.lam
        student, stage_log = distill_classifier_stage(
            student, ncm, train, optim, distill, seed + 2, test, weight_mode, lam  # type: ignore[arg-type]
        )
        log.extend(stage_log)

    return DistillResult(mode, student, log, accuracy(student, test), embedding_student)
