from __future__ import annotations

import numpy as np
import pytest
from pytest_benchmark.fixture import BenchmarkFixture

from gkdistill.autodiff import grad
from gkdistill.cls_distill import NcmTeacher, refilled_objective
from gkdistill.config import DistillConfig
from gkdistill.datagen import Batch, LabeledDataset, make_gaussian_clusters, sample_balanced_batch
from gkdistill.embed_distill import comparison_matching_loss, l2_normalize_rows, mine_semihard_tuples
from gkdistill.model import MlpModel


@pytest.fixture(scope="module")
def dataset() -> LabeledDataset:
    return make_gaussian_clusters(20, 16, 20, seed=0)


@pytest.fixture(scope="module")
def teacher() -> MlpModel:
    return MlpModel.initialize(16, [64, 64], 32, 20, seed=0).freeze()


@pytest.fixture(scope="module")
def student() -> MlpModel:
    return MlpModel.initialize(16, [32], 16, 20, seed=1)


@pytest.fixture(scope="module")
def batch(dataset: LabeledDataset) -> Batch:
    return dataset.take(sample_balanced_batch(dataset, 8, 4, np.random.default_rng(0)))


@pytest.mark.benchmark(
    group="step",
)
def test_embedding_step_performance(benchmark: BenchmarkFixture, teacher: MlpModel, student: MlpModel, batch: Batch):
    distill = DistillConfig()
    teacher_embeddings = teacher.embed(batch.x)

    def step():
        graph = student.graph()
        embeddings = student.embed_node(graph, batch.x)
        mined = mine_semihard_tuples(l2_normalize_rows(embeddings.value), batch.y)
        loss = comparison_matching_loss(
            teacher_embeddings, embeddings, mined, distill.tau_teacher, distill.tau_student
        )
        return grad(loss, graph)

    gradients = benchmark(step)
    assert set(gradients) == set(student.parameters)


@pytest.mark.benchmark(
    group="step",
)
def test_classifier_step_performance(
    benchmark: BenchmarkFixture, dataset: LabeledDataset, teacher: MlpModel, student: MlpModel, batch: Batch
):
    ncm = NcmTeacher.build(teacher, dataset)

    def step():
        graph = student.graph()
        return grad(refilled_objective(graph, student, batch, ncm), graph)

    gradients = benchmark(step)
    assert set(gradients) == set(student.parameters)
