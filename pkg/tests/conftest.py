"""Shared fixtures: small experiment configs and cached fits on the 8-mode grid."""

import numpy as np
import pytest

from distill_lab.gmm import FitConfig, fit_em, grid_ground_truth, sample

TINY_GMM = {
    "n_teacher_train": 2000,
    "n_student_train": 2000,
    "fit": {"n_restarts": 3},
    "n_eval": 2000,
}
TINY_TOKEN = {
    "vocab_size": 6,
    "n_train": 500,
    "seq_len": 8,
    "student_rank": 2,
    "em_max_iter": 50,
    "em_restarts": 1,
    "n_eval": 500,
}


def tiny_config(kind, **overrides):
    """Config mapping for a seconds-scale run of ``kind``."""
    cfg = {
        "kind": kind,
        "master_seed": 11,
        "seeds": 2,
        "beta_list": [1, 100],
        "tau_list": [0.8, 1.0],
        "gmm": dict(TINY_GMM),
        "token": dict(TINY_TOKEN),
        "density": {"x_range": [-4, 4, 9], "y_range": [-1, 1, 5]},
    }
    cfg.update(overrides)
    return cfg


@pytest.fixture(scope="session")
def grid():
    return grid_ground_truth()


@pytest.fixture(scope="session")
def grid_data(grid):
    return sample(grid, 10_000, seed=2024)


@pytest.fixture(scope="session")
def grid_teacher(grid_data):
    return fit_em(grid_data, 4, FitConfig(seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
