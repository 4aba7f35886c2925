"""Direction-of-effect experiments on the default synthetic benchmark. These take minutes; run them
with `pytest --run-slow`."""
from __future__ import annotations

import numpy as np
import pytest

from gkdistill import experiments
from gkdistill.config import ExperimentConfig, SplitConfig
from gkdistill.datagen import make_gaussian_clusters
from gkdistill.errors import DomainError, InvalidHyperparameterError, InvalidRatioError
from gkdistill.experiments import (
    ExperimentData,
    fit_teacher,
    gradient_norms,
    ncm_quality,
    run_sweep,
    select_classes,
    weight_auc,
)

from .testutils import slow

SEEDS = range(5)


def test_prepared_data_keeps_student_test_instances_away_from_the_teacher(tiny_config: ExperimentConfig):
    data = ExperimentData.prepare(tiny_config)
    assert data.teacher_train.class_ids == data.split.teacher_classes
    assert data.student_train.class_ids == data.split.student_classes
    teacher_rows = {row.tobytes() for row in data.teacher_train.x}
    assert not teacher_rows & {row.tobytes() for row in data.student_test.x}
    # Shared classes have the same training instances on both sides.
    shared = [data.split.student_classes.index(c) for c in data.split.shared_classes]
    shared_rows = {row.tobytes() for row in data.student_train.x[np.isin(data.student_train.labels, shared)]}
    assert shared_rows <= teacher_rows


def test_select_classes_relabels_in_the_given_order():
    data = make_gaussian_clusters(4, 2, 3, seed=0)
    selected = select_classes(data, [3, 1])
    assert selected.class_ids == (3, 1)
    np.testing.assert_array_equal(selected.x[selected.labels == 0], data.x[data.labels == 3])


def test_sweep_checks_its_arguments_before_training(tiny_config: ExperimentConfig):
    with pytest.raises(InvalidRatioError):
        run_sweep(tiny_config, ratios=[0.3], seeds=[0])
    with pytest.raises(InvalidHyperparameterError):
        run_sweep(tiny_config, ratios=[0.5], seeds=[0], modes=["magic"])
    with pytest.raises(InvalidHyperparameterError):
        run_sweep(tiny_config, ratios=[0.5], seeds=[0], jobs=0)


def test_sweep_rows_are_sorted(tiny_config: ExperimentConfig):
    rows = run_sweep(tiny_config, ratios=[1.0, 0.5], seeds=[1, 0], modes=["vanilla", "refilled"])
    keys = [(row.ratio, row.seed, row.mode) for row in rows]
    assert keys == sorted(keys)
    assert len(rows) == 8


def test_a_failing_mode_is_recorded_as_nan(tiny_config: ExperimentConfig, monkeypatch: pytest.MonkeyPatch):
    train = experiments.distill_student

    def distill_student(mode: str, *args):
        if mode == "refilled":
            raise DomainError("class 0 has an all-zero prototype")
        return train(mode, *args)

    monkeypatch.setattr(experiments, "distill_student", distill_student)
    rows = run_sweep(tiny_config, seeds=[0], modes=["vanilla", "refilled"])
    keys = [(row.ratio, row.mode) for row in rows]
    assert keys == [(0.5, "refilled"), (0.5, "vanilla"), (1.0, "refilled"), (1.0, "vanilla")]
    for row in rows:
        if row.mode == "refilled":
            assert np.isnan(row.accuracy)
        else:
            assert 0.0 <= row.accuracy <= 1.0


@slow
def test_head_gradient_differences_shrink_with_more_classes():
    config = ExperimentConfig(split=SplitConfig(window=20, overlap_ratio=1.0, sweep_ratios=[1.0]))
    kd, lkd = [], []
    for seed in SEEDS:
        config = config.with_seed(seed)
        data = ExperimentData.prepare(config)
        report = gradient_norms(config, fit_teacher(config, data), data)
        assert report.class_counts == list(range(2, 21, 2))
        kd.append(report.kd_norm_diff)
        lkd.append(report.lkd_norm_diff)
    kd_mean, lkd_mean = np.mean(kd, axis=0), np.mean(lkd, axis=0)
    assert kd_mean[-1] < kd_mean[0]
    assert lkd_mean[-1] < lkd_mean[0]
    assert lkd_mean[-1] > kd_mean[-1]


@slow
def test_refilled_beats_the_baselines():
    config = ExperimentConfig()
    rows = run_sweep(config, seeds=SEEDS, jobs=5)

    def mean_accuracy(ratio: float, mode: str) -> float:
        return float(np.mean([r.accuracy for r in rows if r.ratio == ratio and r.mode == mode]))

    assert config.split.sweep_ratios == [0.0, 0.25, 0.5, 0.75, 1.0]
    for ratio in config.split.sweep_ratios:
        vanilla = mean_accuracy(ratio, "vanilla")
        assert 0.7 <= vanilla <= 0.9, (ratio, vanilla)
        assert mean_accuracy(ratio, "refilled") >= vanilla, ratio
    for ratio in (0.0, 0.5):
        assert mean_accuracy(ratio, "refilled") >= mean_accuracy(ratio, "refilled-minus") >= mean_accuracy(ratio, "vanilla")


@slow
def test_embedding_stage_improves_the_nearest_class_mean():
    stage1, vanilla = [], []
    for seed in SEEDS:
        config = ExperimentConfig().with_seed(seed)
        data = ExperimentData.prepare(config)
        rows = dict(ncm_quality(config, fit_teacher(config, data), data))
        stage1.append(rows["stage1"])
        vanilla.append(rows["vanilla"])
    assert np.mean(stage1) > np.mean(vanilla)


@slow
def test_pseudo_label_weights_separate_seen_from_unseen_classes():
    aucs, shuffled = [], []
    for seed in SEEDS:
        config = ExperimentConfig(split=SplitConfig(overlap_ratio=0.625)).with_seed(seed)
        data = ExperimentData.prepare(config)
        result = weight_auc(config, fit_teacher(config, data), data)
        aucs.append(result.study.auc)
        shuffled.append(result.shuffled_auc)
    assert np.mean(aucs) > 0.7
    assert 0.45 <= np.mean(shuffled) <= 0.55

