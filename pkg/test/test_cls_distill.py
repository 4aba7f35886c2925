from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from gkdistill.autodiff import Matrix, grad, ops
from gkdistill.cls_distill import (
    SINGLE_CLASS,
    LocalClassSet,
    NcmTeacher,
    PrototypeSet,
    adaptive_weight_gap,
    adaptive_weight_pl,
    class_prototypes,
    cross_entropy_objective,
    instance_weights,
    local_kd_loss,
    local_kd_terms,
    ncm_posterior,
    refilled_objective,
    shared_teacher_columns,
    softmax,
    standard_kd_loss,
)
from gkdistill.datagen import Batch
from gkdistill.embed_distill import l2_normalize_rows
from gkdistill.errors import (
    DomainError,
    InvalidHyperparameterError,
    MissingClassError,
    ShapeMismatchError,
    StructuralError,
)
from gkdistill.model import HEAD, MlpModel

from .testutils import parametrize, random_model, shifted_identity_teacher, two_cluster_dataset


def test_prototypes_are_class_means():
    rng = np.random.default_rng(0)
    embeddings = rng.normal(size=(9, 3))
    labels = np.array([2, 0, 1, 0, 2, 1, 1, 0, 2])
    prototypes = class_prototypes(embeddings, labels, class_ids=[5, 6, 7])
    for c in range(3):
        np.testing.assert_allclose(prototypes.centers.values[c], embeddings[labels == c].mean(axis=0))
    assert prototypes.class_ids == (5, 6, 7)
    assert len(prototypes) == 3


def test_prototypes_need_every_class():
    with pytest.raises(MissingClassError):
        class_prototypes(np.ones((2, 2)), [0, 2], class_count=3)
    with pytest.raises(ShapeMismatchError):
        class_prototypes(np.ones((3, 2)), [0, 1])


def test_prototype_rows_cannot_be_zero():
    with pytest.raises(DomainError):
        PrototypeSet(Matrix([[1.0, 0.0], [0.0, 0.0]]), (0, 1))
    with pytest.raises(StructuralError):
        PrototypeSet(Matrix([[1.0, 0.0]]), (0, 1))


def test_prototypes_save_and_load(tmp_path: Path):
    prototypes = PrototypeSet(Matrix([[1.0, 2.0], [3.0, -1.0]]), (4, 8))
    prototypes.save(tmp_path / "prototypes")
    assert PrototypeSet.load(tmp_path / "prototypes") == prototypes


def test_ncm_teacher_scores_are_cosine_to_normalized_prototypes():
    rng = np.random.default_rng(1)
    data = two_cluster_dataset(rng)
    teacher = shifted_identity_teacher()
    ncm = NcmTeacher.build(teacher, data)
    embeddings = l2_normalize_rows(teacher.embed(data.x))
    centers = np.stack([embeddings[data.labels == c].mean(axis=0) for c in range(2)])
    expected = embeddings @ (centers / np.linalg.norm(centers, axis=1, keepdims=True)).T
    np.testing.assert_allclose(ncm.scores(data.x), expected)
    assert ncm.scores(data.x).shape == (len(data), 2)


def test_ncm_teacher_temperature_sharpens_the_scores():
    teacher = shifted_identity_teacher()
    prototypes = PrototypeSet(Matrix([[1.0, 0.0], [0.0, 1.0]]), (0, 1))
    x = np.array([[-4.0, 0.0], [0.0, -4.0], [-2.0, -3.0]])
    warm = NcmTeacher(teacher, prototypes)
    cold = NcmTeacher(teacher, prototypes, temperature=0.1)
    np.testing.assert_allclose(cold.scores(x), warm.scores(x) / 0.1)
    assert np.all(softmax(cold.scores(x)).max(axis=1) > softmax(warm.scores(x)).max(axis=1))
    assert np.all(adaptive_weight_pl(cold.scores(x), 1.0) > adaptive_weight_pl(warm.scores(x), 1.0))
    with pytest.raises(InvalidHyperparameterError):
        NcmTeacher(teacher, prototypes, temperature=0.0)


def test_ncm_posterior_normalizes_linearly():
    prototypes = PrototypeSet(Matrix([[1.0, 0.0], [0.0, 1.0]]), (0, 1))
    posterior = ncm_posterior([3.0, 1.0], prototypes)
    np.testing.assert_allclose(posterior.probs, [0.75, 0.25])
    assert not posterior.degenerate_normalization


def test_ncm_posterior_falls_back_to_softmax():
    prototypes = PrototypeSet(Matrix([[1.0, 0.0], [0.0, 1.0]]), (0, 1))
    posterior = ncm_posterior([-1.0, 0.0], prototypes)
    assert posterior.degenerate_normalization
    np.testing.assert_allclose(posterior.probs, softmax([-1.0, 0.0]))
    with pytest.raises(DomainError):
        ncm_posterior([0.0, 0.0], prototypes)


def test_pl_weights_lie_in_the_unit_interval():
    rng = np.random.default_rng(2)
    k = rng.integers(2, 8, size=10_000)
    for size in np.unique(k):
        scores = np.log(rng.dirichlet(np.ones(size), size=int((k == size).sum())))
        weights = adaptive_weight_pl(scores, 1.0)
        assert np.all(weights > 0) and np.all(weights <= 1.0)


def test_pl_weight_of_a_confident_teacher_is_lambda():
    assert adaptive_weight_pl(np.array([50.0, 0.0, 0.0]), 2.0) == pytest.approx(2.0)
    assert adaptive_weight_pl(np.zeros(4), 1.0) == pytest.approx(2.0 / 5.0)


def test_gap_weights():
    p = np.array([[0.2, 0.8], [0.5, 0.5]])
    np.testing.assert_allclose(adaptive_weight_gap(p, p, 1.5), 1.5)
    q = np.array([[0.9, 0.1], [0.5, 0.5]])
    weights = adaptive_weight_gap(p, q, 1.0)
    assert weights[0] < 1.0 and weights[1] == pytest.approx(1.0)
    with pytest.raises(StructuralError):
        adaptive_weight_gap(p, q, 1.0, teacher_classes=[0, 1], student_classes=[0, 2])


def test_gap_weights_lie_in_zero_to_lambda():
    rng = np.random.default_rng(3)
    k = rng.integers(2, 8, size=10_000)
    for size in np.unique(k):
        count = int((k == size).sum())
        p, q = rng.dirichlet(np.ones(size), size=count), rng.dirichlet(np.ones(size), size=count)
        weights = adaptive_weight_gap(p, q, 1.5)
        assert np.all(weights > 0) and np.all(weights <= 1.5)


def test_gap_weight_decreases_as_the_student_drifts_away():
    p = np.array([0.7, 0.2, 0.1])
    far = np.array([0.01, 0.01, 0.98])
    q = np.stack([(1 - t) * p + t * far for t in np.linspace(0.0, 0.9, 50)])
    weights = adaptive_weight_gap(np.tile(p, (50, 1)), q, 1.0)
    assert weights[0] == pytest.approx(1.0)
    assert np.all(np.diff(weights) < 0)


def test_negative_lambda_is_rejected():
    with pytest.raises(InvalidHyperparameterError):
        adaptive_weight_pl(np.zeros(2), -1.0)
    with pytest.raises(InvalidHyperparameterError):
        instance_weights("sometimes", np.zeros((1, 2)), np.zeros((1, 2)), LocalClassSet((0, 1)), 1.0)  # type: ignore[arg-type]


def test_local_class_set():
    assert LocalClassSet.from_labels([3, 1, 3, 0]).classes == (0, 1, 3)
    with pytest.raises(StructuralError):
        LocalClassSet(())
    with pytest.raises(StructuralError):
        LocalClassSet((2, 1))


def _batch(rng: np.random.Generator, labels) -> Batch:
    labels = np.asarray(labels)
    return Batch(rng.normal(size=(len(labels), 3)), labels, np.arange(len(labels)))


def test_local_kd_is_zero_when_the_student_matches_the_teacher():
    rng = np.random.default_rng(3)
    model = random_model(rng)
    graph = model.graph()
    logits = model.logits_node(graph, model.embed_node(graph, rng.normal(size=(5, 3))))
    terms = local_kd_terms(logits, logits.value, LocalClassSet((0, 2)))
    np.testing.assert_allclose(terms.value, 0.0, atol=1e-12)


def test_local_kd_only_touches_the_local_head_columns():
    rng = np.random.default_rng(4)
    model = random_model(rng, widths=(16,), embed_dim=8)
    batch = _batch(rng, [0, 0, 2, 2])
    graph = model.graph()
    logits = model.logits_node(graph, model.embed_node(graph, batch.x))
    loss = local_kd_loss(logits, rng.normal(size=(4, 4)), LocalClassSet.from_labels(batch.y))
    head = grad(loss, graph)[HEAD]
    assert np.all(head[:, [1, 3]] == 0)
    assert np.any(head[:, [0, 2]] != 0)


def test_single_class_batches_flag_the_local_term():
    rng = np.random.default_rng(5)
    model = random_model(rng)
    batch = _batch(rng, [1, 1, 1])
    graph = model.graph()
    logits = model.logits_node(graph, model.embed_node(graph, batch.x))
    loss = local_kd_loss(logits, rng.normal(size=(3, 4)), LocalClassSet((1,)))
    assert loss.item() == 0.0 and SINGLE_CLASS in loss.flags

    graph = model.graph()
    refilled = refilled_objective(graph, model, batch, rng.normal(size=(3, 4)))
    assert SINGLE_CLASS in refilled.flags
    assert refilled.item() == pytest.approx(cross_entropy_objective(model.graph(), model, batch).item())


def test_zero_lambda_gives_cross_entropy():
    rng = np.random.default_rng(6)
    model = random_model(rng)
    batch = _batch(rng, [0, 1, 2, 3])
    scores = rng.normal(size=(4, 4))
    refilled = refilled_objective(model.graph(), model, batch, scores, lam=0.0)
    ce = cross_entropy_objective(model.graph(), model, batch)
    assert refilled.item() == ce.item()


@parametrize("seed", range(5))
def test_a_confident_teacher_makes_pl_weights_constant(seed: int):
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    batch = _batch(rng, [0, 0, 1, 1, 3, 3])
    scores = np.zeros((6, 4))
    scores[np.arange(6), batch.y] = 40.0
    pl = refilled_objective(model.graph(), model, batch, scores, lam=2.0, weight_mode="pl")
    none = refilled_objective(model.graph(), model, batch, scores, lam=2.0, weight_mode="none")
    assert pl.item() == pytest.approx(none.item(), rel=1e-2)


def test_refilled_objective_accepts_an_ncm_teacher():
    rng = np.random.default_rng(7)
    data = two_cluster_dataset(rng)
    teacher = shifted_identity_teacher()
    ncm = NcmTeacher.build(teacher, data)
    student = MlpModel.initialize(2, [4], 3, 2, seed=1)
    batch = Batch(data.x, data.labels, np.arange(len(data)))
    from_teacher = refilled_objective(student.graph(), student, batch, ncm)
    from_scores = refilled_objective(student.graph(), student, batch, ncm.scores(data.x))
    assert from_teacher.item() == from_scores.item()
    with pytest.raises(InvalidHyperparameterError):
        refilled_objective(student.graph(), student, batch, ncm, weight_mode="sometimes")  # type: ignore[arg-type]


def test_standard_kd_needs_matching_classes():
    rng = np.random.default_rng(8)
    model = random_model(rng)
    graph = model.graph()
    logits = model.logits_node(graph, model.embed_node(graph, rng.normal(size=(3, 3))))
    with pytest.raises(StructuralError):
        standard_kd_loss(logits, np.zeros((3, 5)), [0, 1, 2])
    ce = ops.mean(ops.cross_entropy_rows(logits, np.array([0, 1, 2])))
    assert standard_kd_loss(logits, np.zeros((3, 4)), [0, 1, 2], lam=0.0).item() == ce.item()


def test_shared_teacher_columns():
    assert shared_teacher_columns([3, 4, 5, 6], [5, 3]).tolist() == [2, 0]
    with pytest.raises(StructuralError):
        shared_teacher_columns([3, 4], [4, 7])
