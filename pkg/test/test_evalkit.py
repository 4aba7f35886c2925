from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np
import pytest

from gkdistill.autodiff import Matrix
from gkdistill.cls_distill import NcmTeacher
from gkdistill.datagen import LabeledDataset, make_gaussian_clusters, restrict
from gkdistill.errors import (
    EmptyDatasetError,
    InvalidHyperparameterError,
    MixedScaleError,
    StructuralError,
    UndefinedAucError,
)
from gkdistill.evalkit import (
    GradientNormReport,
    accuracy,
    build_joint_head,
    gradient_norm_study,
    harmonic_mean,
    joint_incremental_classifier,
    ncm_accuracy,
    nearest_neighbor_accuracy,
    rank_auc,
    weight_histogram_edges,
    weight_study,
)
from gkdistill.experiments import select_classes
from gkdistill.model import HEAD, MlpModel

from .testutils import loop_accuracy, loop_ncm_accuracy, parametrize, shifted_identity_teacher


@parametrize("seed", range(5))
def test_accuracy_matches_a_per_instance_loop(seed: int):
    data = make_gaussian_clusters(4, 3, 10, seed=seed)
    model = MlpModel.initialize(3, [8], 5, 4, seed=seed)
    expected = loop_accuracy(lambda x: int(model.predict(x[None, :])[0]), data)
    assert accuracy(model, data) == pytest.approx(expected)


def test_empty_datasets_cannot_be_evaluated():
    empty = LabeledDataset(Matrix(np.zeros((0, 3))), np.zeros(0, dtype=int), 2)
    model = MlpModel.initialize(3, [4], 2, 2, seed=0)
    with pytest.raises(EmptyDatasetError):
        accuracy(model, empty)
    with pytest.raises(EmptyDatasetError):
        ncm_accuracy(model.embed, make_gaussian_clusters(2, 3, 4), empty)


@parametrize("seed", range(5))
def test_ncm_accuracy_matches_a_per_instance_loop(seed: int):
    train = make_gaussian_clusters(4, 3, 10, seed=seed)
    test = make_gaussian_clusters(4, 3, 6, seed=seed + 100)
    model = MlpModel.initialize(3, [8], 5, 4, seed=seed)
    assert ncm_accuracy(model.embed, train, test) == pytest.approx(loop_ncm_accuracy(model.embed, train, test))

    identity = lambda x: np.asarray(x)  # noqa: E731
    assert ncm_accuracy(identity, train, test) == pytest.approx(loop_ncm_accuracy(identity, train, test))


def test_nearest_neighbor_accuracy():
    train = make_gaussian_clusters(3, 2, 8, seed=0)
    test = make_gaussian_clusters(3, 2, 5, seed=1)
    expected = np.mean(
        [
            train.labels[int(np.argmin(np.linalg.norm(train.x - x, axis=1)))] == y
            for x, y in zip(test.x, test.labels)
        ]
    )
    assert nearest_neighbor_accuracy(lambda x: np.asarray(x), train, test) == pytest.approx(expected)


def test_noiseless_clusters_are_perfectly_separable():
    data = make_gaussian_clusters(8, 4, 10, noise_sigma=1e-6, seed=0)
    split = restrict(data, list(range(8)), 0.5, seed=0)
    assert nearest_neighbor_accuracy(lambda x: np.asarray(x), split.train, split.test) == 1.0
    assert ncm_accuracy(lambda x: np.asarray(x), split.train, split.test) == 1.0


def test_harmonic_mean():
    assert harmonic_mean(63.73, 31.97) == pytest.approx(42.58, abs=0.005)
    assert harmonic_mean(49.85, 45.70) == pytest.approx(47.68, abs=0.005)
    assert harmonic_mean(0.6373, 0.3197) == pytest.approx(0.4258, abs=5e-5)
    assert harmonic_mean(0.0, 0.0) == 0.0
    with pytest.raises(MixedScaleError):
        harmonic_mean(63.73, 0.5)
    with pytest.raises(MixedScaleError):
        harmonic_mean(0.5, 1.5, scale="fraction")


def test_harmonic_mean_never_exceeds_the_arithmetic_mean():
    rng = np.random.default_rng(0)
    for a, b in rng.uniform(0, 1, size=(1000, 2)):
        assert harmonic_mean(a, b, scale="fraction") <= (a + b) / 2 + 1e-15


def test_harmonic_mean_of_exactly_one_needs_an_explicit_scale():
    with pytest.raises(MixedScaleError, match="scale="):
        harmonic_mean(1.0, 50.0)
    assert harmonic_mean(1.0, 50.0, scale="percent") == pytest.approx(100.0 / 51.0)
    with pytest.raises(MixedScaleError):
        harmonic_mean(1.0, 50.0, scale="fraction")
    assert harmonic_mean(1.0, 0.5) == pytest.approx(2.0 / 3.0)
    assert harmonic_mean(1.0, 1.0) == 1.0


def _brute_force_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    pairs = list(itertools.product(scores[positive], scores[~positive]))
    return sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in pairs) / len(pairs)


@parametrize("seed", range(10))
def test_rank_auc_matches_pair_counting(seed: int):
    rng = np.random.default_rng(seed)
    # Rounding creates ties.
    scores = np.round(rng.normal(size=30), 1)
    positive = rng.random(30) < 0.4
    positive[:2] = [True, False]
    assert rank_auc(scores, positive) == pytest.approx(_brute_force_auc(scores, positive))


def test_rank_auc_needs_both_groups():
    with pytest.raises(UndefinedAucError):
        rank_auc([0.1, 0.2], [True, True])


@parametrize("seed", range(5))
def test_rank_auc_only_depends_on_the_order(seed: int):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.normal(size=40), 1)
    positive = rng.random(40) < 0.5
    positive[:2] = [True, False]
    assert rank_auc(np.exp(3.0 * scores) + 1.0, positive) == rank_auc(scores, positive)
    assert rank_auc(-scores, positive) == pytest.approx(1.0 - rank_auc(scores, positive))


def _models(student_classes, teacher_classes, student_dim=4, teacher_dim=6):
    student = MlpModel.initialize(3, [8], student_dim, len(student_classes), seed=1, class_ids=student_classes)
    teacher = MlpModel.initialize(3, [8], teacher_dim, len(teacher_classes), seed=2, class_ids=teacher_classes)
    return student, teacher.freeze()


def _unit(v: np.ndarray) -> np.ndarray:
    return v / max(np.linalg.norm(v), 1e-12)


def test_joint_head_columns_are_unit_norm_and_student_first():
    student, teacher = _models((2, 3, 4), (0, 1, 2))
    head = build_joint_head(student, teacher)
    assert head.class_ids == (0, 1, 2, 3, 4)
    assert head.from_student.tolist() == [False, False, True, True, True]
    np.testing.assert_allclose(np.linalg.norm(head.weights, axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(head.weights[:4, 2], _unit(student.parameters[HEAD].values[:, 0]))


@parametrize("seed", range(3))
def test_joint_classifier_matches_a_per_instance_loop(seed: int):
    student, teacher = _models((2, 3, 4), (0, 1, 2, 3))
    clusters = make_gaussian_clusters(5, 3, 6, seed=seed)
    old_test = select_classes(clusters, [0, 1, 2, 3])
    new_test = select_classes(clusters, [2, 3, 4])
    head, report = joint_incremental_classifier(student, teacher, old_test, new_test)

    student_w = student.parameters[HEAD].values
    teacher_w = teacher.parameters[HEAD].values

    def predict(x: np.ndarray) -> int:
        s, t = _unit(student.embed(x[None])[0]), _unit(teacher.embed(x[None])[0])
        scores = {}
        for c in (0, 1, 2, 3, 4):
            if c in student.class_ids:
                scores[c] = float(s @ _unit(student_w[:, student.class_ids.index(c)]))
            else:
                scores[c] = float(t @ _unit(teacher_w[:, teacher.class_ids.index(c)]))
        return max(sorted(scores), key=lambda c: scores[c])

    old_ids = np.asarray(old_test.class_ids)[old_test.labels]
    new_ids = np.asarray(new_test.class_ids)[new_test.labels]
    # Old instances of classes the student also learned are left out.
    old_only = [(x, c) for x, c in zip(old_test.x, old_ids) if c in (0, 1)]
    old_acc = np.mean([predict(x) == c for x, c in old_only])
    new_acc = np.mean([predict(x) == c for x, c in zip(new_test.x, new_ids)])
    assert report.old_to_all == pytest.approx(old_acc)
    assert report.new_to_all == pytest.approx(new_acc)
    overall = (old_acc * len(old_only) + new_acc * len(new_test)) / (len(old_only) + len(new_test))
    assert report.overall == pytest.approx(overall)
    assert report.mode == "own-embedding"
    assert head.predict(new_test.x).tolist() == [predict(x) for x in new_test.x]


def test_old_instances_of_shared_classes_are_left_out():
    student, teacher = _models((2, 3), (0, 1, 2, 3))
    clusters = make_gaussian_clusters(4, 3, 6, seed=0)
    new_test = select_classes(clusters, [2, 3])
    _, shared_only = joint_incremental_classifier(student, teacher, select_classes(clusters, [2, 3]), new_test)
    assert np.isnan(shared_only.old_to_all)
    assert shared_only.overall == pytest.approx(shared_only.new_to_all)
    _, report = joint_incremental_classifier(student, teacher, select_classes(clusters, [0, 1, 2, 3]), new_test)
    _, old_only = joint_incremental_classifier(student, teacher, select_classes(clusters, [0, 1]), new_test)
    assert report == old_only


def test_student_embedding_mode_needs_equal_sizes():
    student, teacher = _models((2, 3), (0, 1))
    clusters = make_gaussian_clusters(4, 3, 4, seed=0)
    with pytest.raises(StructuralError):
        joint_incremental_classifier(
            student, teacher, select_classes(clusters, [0, 1]), select_classes(clusters, [2, 3]), "student-embedding"
        )
    student, teacher = _models((2, 3), (0, 1), teacher_dim=4)
    _, report = joint_incremental_classifier(
        student, teacher, select_classes(clusters, [0, 1]), select_classes(clusters, [2, 3]), "student-embedding"
    )
    assert 0.0 <= report.overall <= 1.0


def test_new_instances_must_belong_to_the_student():
    student, teacher = _models((2, 3), (0, 1))
    clusters = make_gaussian_clusters(4, 3, 4, seed=0)
    with pytest.raises(StructuralError):
        joint_incremental_classifier(
            student, teacher, select_classes(clusters, [0, 1]), select_classes(clusters, [1, 2])
        )


def test_weight_study(tmp_path: Path):
    clusters = make_gaussian_clusters(3, 2, 20, noise_sigma=0.3, seed=0)
    ncm = NcmTeacher.build(shifted_identity_teacher(), clusters)
    seen = clusters.labels < 2
    study = weight_study(ncm, clusters.x, seen, lam=1.0)
    assert np.all((study.weights > 0) & (study.weights <= 1.0))
    assert study.seen_counts.sum() == seen.sum()
    assert study.unseen_counts.sum() == (~seen).sum()
    assert study.auc == pytest.approx(rank_auc(study.weights, seen))
    study.to_csv(tmp_path / "weights.csv")
    lines = (tmp_path / "weights.csv").read_text().splitlines()
    assert lines[0] == "lambda_i,seen_flag"
    assert len(lines) == len(clusters) + 1
    with pytest.raises(StructuralError):
        weight_study(ncm, clusters.x, seen[:-1])


def test_weight_histogram_edges():
    np.testing.assert_allclose(weight_histogram_edges(1.0), np.linspace(0, 1, 21))
    assert len(weight_histogram_edges(0.01)) == 2


def _gradient_study(lam: float) -> GradientNormReport:
    dataset = make_gaussian_clusters(6, 3, 8, seed=0)
    teacher = MlpModel.initialize(3, [8], 6, 6, seed=0, class_ids=range(6)).freeze()
    dataset = select_classes(dataset, range(6))
    return gradient_norm_study(
        dataset,
        teacher,
        lambda count, seed: MlpModel.initialize(3, [8], 4, count, seed=seed),
        [2, 4, 6],
        classes_per_batch=3,
        instances_per_class=2,
        lam=lam,
        repeats=2,
    )


def test_gradient_norm_study_shape_and_zero_lambda(tmp_path: Path):
    report = _gradient_study(1.0)
    assert report.class_counts == [2, 4, 6]
    assert all(v >= 0 for v in report.kd_norm_diff + report.lkd_norm_diff)
    report.to_csv(tmp_path / "norms.csv")
    assert (tmp_path / "norms.csv").read_text().splitlines()[0] == "class_count,kd_norm_diff,lkd_norm_diff"

    zero = _gradient_study(0.0)
    assert zero.kd_norm_diff == [0.0, 0.0, 0.0]
    assert zero.lkd_norm_diff == [0.0, 0.0, 0.0]


@parametrize("grid", [[], [1, 2], [4, 2], [2, 8]])
def test_gradient_norm_study_grid_validation(grid):
    teacher = MlpModel.initialize(3, [4], 3, 6, seed=0).freeze()
    with pytest.raises(InvalidHyperparameterError):
        gradient_norm_study(make_gaussian_clusters(6, 3, 8), teacher, MlpModel.initialize, grid)  # type: ignore[arg-type]
