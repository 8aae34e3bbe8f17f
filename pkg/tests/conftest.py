"""Shared fixtures: a fresh tape per test and a small reusable dataset.

The dataset fixtures use 64px images and a narrow detector so that training
smoke tests stay in the seconds range; the acceptance tests build their own
full-scale data.
"""

import numpy as np
import pytest

from pyrafuse.engine import reset_tape
from pyrafuse.scenes import GeneratorConfig, export_dataset, generate_split
from pyrafuse.training import (
    ModelConfig,
    NeckToggles,
    OptimizerConfig,
    ScheduleConfig,
    TrainConfig,
)

SMALL_IMAGE = 64


@pytest.fixture(autouse=True)
def fresh_tape():
    reset_tape()
    yield
    reset_tape()


def small_generator_config() -> GeneratorConfig:
    cfg = GeneratorConfig()
    cfg.image_size = SMALL_IMAGE
    return cfg


def small_train_config(epochs: int = 1, seed: int = 0, lr: float = 0.0025,
                       toggles: tuple = (True, True, True)) -> TrainConfig:
    return TrainConfig(
        optimizer=OptimizerConfig(lr=lr),
        schedule=ScheduleConfig(epochs=epochs),
        neck=NeckToggles(*toggles),
        model=ModelConfig(channels=8, width=4),
        seed=seed,
        image_size=SMALL_IMAGE,
    )


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Read-only 64px dataset with all four splits."""
    root = tmp_path_factory.mktemp("small_data")
    cfg = small_generator_config()
    for split, count in (("train", 24), ("easy", 10), ("hard", 10), ("hidden", 10)):
        export_dataset(generate_split(split, count, 0, cfg), root / split, cfg)
    return root


@pytest.fixture()
def rng():
    return np.random.default_rng(7)
