"""Shared helpers: finite-difference oracles and small benchmark fixtures."""
import numpy as np
import pytest

from adbcr import data


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise relative error with a floor so near-zero grads stay comparable."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference(f, array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. every entry of array.

    f takes no arguments and must re-read array, which is perturbed in place.
    """
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        saved = array[idx]
        array[idx] = saved + eps
        up = f()
        array[idx] = saved - eps
        down = f()
        array[idx] = saved
        grad[idx] = (up - down) / (2.0 * eps)
    return grad


def small_benchmark(seed: int = 0, n: int = 160, het: float = 1.0) -> data.Dataset:
    """Small split benchmark dataset for trainer-level tests."""
    config = data.DgpConfig(n=n, d=4, bias_strength=1.0, effect_heterogeneity=het,
                            noise_sd=0.5, nonlinearity="quadratic", seed=seed)
    dataset, _ = data.generate(config)
    return data.split(dataset, seed=seed)


@pytest.fixture(scope="module")
def bench_dataset() -> data.Dataset:
    return small_benchmark()
