from __future__ import annotations

import logging
import sys
from logging import getLogger as get_logger

import numpy as np
import pytest

from gkdistill.config import DatasetConfig, DistillConfig, ExperimentConfig, ModelConfig, OptimConfig, SplitConfig

pytest.register_assert_rewrite("test.testutils")


def pytest_addoption(parser: pytest.Parser):
    parser.addoption(
        "--run-slow", action="store_true", default=False, help="also run the tests marked `slow`"
    )


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session", autouse=True)
def setup_logging():
    project_logger = get_logger("gkdistill")
    ch = logging.StreamHandler(stream=sys.stdout)
    ch.setFormatter(
        logging.Formatter(
            "%(levelname)s {%(pathname)s:%(lineno)d} - %(message)s",
            "%m-%d %H:%M:%S",
        )
    )
    project_logger.addHandler(ch)


@pytest.fixture
def no_warning_log_messages(caplog):
    yield
    for when in ("setup", "call"):
        messages = [x.message for x in caplog.get_records(when) if x.levelno == logging.WARNING]
        if messages:
            pytest.fail(f"warning messages encountered during testing: {messages}")


@pytest.fixture(params=[0, 1, 2])
def seed(request: pytest.FixtureRequest) -> int:
    return request.param


@pytest.fixture
def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    """A config small enough for a whole CLI run to take about a second."""
    return ExperimentConfig(
        seed=0,
        dataset=DatasetConfig(classes=6, dim=4, per_class=12, sigma=0.6),
        split=SplitConfig(window=4, overlap_ratio=0.5, sweep_ratios=[0.5, 1.0], train_fraction=0.5),
        model=ModelConfig(teacher_widths=[8], teacher_embed_dim=6, student_widths=[6], student_embed_dim=4),
        optim=OptimConfig(
            batch_size=8, epochs=2, lr=0.05, decay_epochs=[1], classes_per_batch=3, instances_per_class=3
        ),
        distill=DistillConfig(),
    )
