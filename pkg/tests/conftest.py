"""Test fixtures for ecrl tests."""

import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

from ecrl.config import apply_overrides
from ecrl.models import ExperimentConfig

TINY_OVERRIDES = {
    "network.policy_hidden": [32, 32],
    "network.estimator_hidden": [32, 32],
    "network.width_scale": 0.25,
    "estimator.latent_dim": 4,
    "estimator.minibatch_sequences": 4,
    "estimator.data_reuse": 1,
    "ppo.minibatch_size": 32,
    "ppo.epochs": 1,
    "trainer.n_envs": 8,
    "trainer.rollout_length": 8,
    "trainer.iterations": 2,
    "trainer.checkpoint_interval": 1,
    "bench.n_trials": 1,
    "bench.batch_size": 12,
    "bench.consecutive_trials": 2,
    "bench.consecutive_cap": 2,
}


def make_tiny_config(**overrides) -> ExperimentConfig:
    """Desk config shrunk to 8-wide networks and 8 environments; extra dotted overrides via a__b=value."""
    config = apply_overrides(ExperimentConfig.desk(), TINY_OVERRIDES)
    return apply_overrides(config, {key.replace("__", "."): value for key, value in overrides.items()})


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function f at x."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        step = np.zeros_like(x)
        step[i] = eps
        grad[i] = (f(x + step) - f(x - step)) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files."""
    temp_path = Path(tempfile.mkdtemp())
    yield temp_path
    shutil.rmtree(temp_path)


@pytest.fixture
def tiny_config():
    """Smallest configuration that exercises every code path."""
    return make_tiny_config()


@pytest.fixture
def noiseless_config():
    """Tiny configuration without domain randomization."""
    return make_tiny_config(randomization__enabled=False)


@pytest.fixture
def rng():
    """Seeded generator."""
    return np.random.default_rng(1234)
