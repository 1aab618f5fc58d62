"""
Shared fixtures and helpers for the counterdkl test-suite
"""

from typing import Callable

import numpy as np
import pytest
from loguru import logger

from counterdkl.dataset import Dataset


@pytest.fixture(autouse=True)
def quiet_logs():
    """Keep loguru output out of the test report"""
    logger.remove()
    yield


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def random_spd(rng: np.random.Generator, n: int) -> np.ndarray:
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array"""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up = x.copy()
        down = x.copy()
        up[idx] += step
        down[idx] -= step
        grad[idx] = (f(up) - f(down)) / (2.0 * step)
    return grad


def random_dataset(rng: np.random.Generator, n: int = 20, p: int = 3, d: int = 2, m: int = 2) -> Dataset:
    """Random observational data in which every action is observed"""
    x = rng.uniform(-2.0, 2.0, size=(n, p))
    a = np.arange(n) % d
    rng.shuffle(a)
    y = np.column_stack([np.sin(x[:, 0]) + 0.5 * a * (k + 1) + 0.1 * rng.standard_normal(n) for k in range(m)])
    return Dataset(X=x, A=a, Y=y, n_actions=d, seed=0, dgp="random")


@pytest.fixture
def small_data(rng) -> Dataset:
    return random_dataset(rng)
