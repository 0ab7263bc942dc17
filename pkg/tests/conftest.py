# tests/conftest.py
"""Shared oracles and small fixtures."""

from typing import Callable

import numpy as np
import pytest

from dyslim.systems import LorenzGenConfig, generate_lorenz_dataset


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Gradient of a scalar function of a flat vector by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        up = x.copy()
        down = x.copy()
        up[i] += eps
        down[i] -= eps
        grad[i] = (fn(up) - fn(down)) / (2.0 * eps)
    return grad


def rq_value(a: np.ndarray, b: np.ndarray, bandwidths) -> float:
    d = float(np.sum((a - b) ** 2))
    return sum(s * s / (s * s + d) for s in bandwidths)


def brute_mmd2(u: np.ndarray, v: np.ndarray, bandwidths, estimator: str) -> float:
    """Double-sum MMD^2, written as plainly as possible."""
    n, m = len(u), len(v)
    suu = sum(rq_value(u[i], u[j], bandwidths) for i in range(n) for j in range(n)
              if estimator == "biased" or i != j)
    svv = sum(rq_value(v[i], v[j], bandwidths) for i in range(m) for j in range(m)
              if estimator == "biased" or i != j)
    suv = sum(rq_value(u[i], v[j], bandwidths) for i in range(n) for j in range(m))
    if estimator == "biased":
        return suu / n ** 2 + svv / m ** 2 - 2.0 * suv / (n * m)
    return suu / (n * (n - 1)) + svv / (m * (m - 1)) - 2.0 * suv / (n * m)


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rel: float = 1e-4, floor: float = 1e-8):
    err = np.linalg.norm(analytic - numeric)
    assert err <= rel * np.linalg.norm(numeric) + floor, f"gradient error {err:.3e}"


@pytest.fixture(scope="session")
def small_lorenz():
    """A short, cheap Lorenz dataset: dt = 0.1, 21 states per trajectory."""
    config = LorenzGenConfig(h=0.01, warmup_steps=500, downsample_factor=10, n_trajectories=12,
                             steps_per_trajectory=21 * 10, seed=3)
    return generate_lorenz_dataset(config)
