"""Synthetic test functions and the RMSE metric.

Each function returns the noiseless mean; noise is added separately by
:meth:`TestFunction.sample` so it can be drawn from its own random stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


def parabola(X) -> np.ndarray:
    x = _cols(X, 1)[:, 0]
    return x + x * x


def sincauchy(X) -> np.ndarray:
    """``sin(x)`` minus a Cauchy density (location 1.6, scale 0.15)."""
    x = _cols(X, 1)[:, 0]
    scale = 0.15
    return np.sin(x) - 1.0 / (math.pi * scale * (1.0 + ((x - 1.6) / scale) ** 2))


def exp2d(X) -> np.ndarray:
    X = _cols(X, 2)
    return X[:, 0] * np.exp(-X[:, 0] ** 2 - X[:, 1] ** 2)


def friedman(X) -> np.ndarray:
    X = _cols(X, 5)
    return (
        10.0 * np.sin(math.pi * X[:, 0] * X[:, 1])
        + 20.0 * (X[:, 2] - 0.5) ** 2
        + 10.0 * X[:, 3]
        + 5.0 * X[:, 4]
    )


def _cols(X, d: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, d) if d > 1 else X.reshape(-1, 1)
    if X.shape[1] != d:
        raise ValueError(f"expected {d} input column(s), got {X.shape[1]}")
    return X


@dataclass(frozen=True)
class TestFunction:
    """A named mean function with its input box and Gaussian noise level."""

    __test__ = False  # not a pytest class

    name: str
    mean: Callable[[np.ndarray], np.ndarray]
    bounds: tuple[tuple[float, float], ...]
    noise_sd: float

    @property
    def d(self) -> int:
        return len(self.bounds)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        Xc = _cols(X, self.d)
        if np.any(Xc < lo) or np.any(Xc > hi):
            raise ValueError(f"input outside the {self.name} domain {self.bounds}")
        return self.mean(Xc)

    def uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return lo + (hi - lo) * rng.random((n, self.d))

    def sample(self, X, rng: np.random.Generator) -> np.ndarray:
        """Noisy responses at the rows of ``X``."""
        m = self(X)
        return m + self.noise_sd * rng.standard_normal(m.shape[0])

    def objective(self, rng: np.random.Generator) -> Callable:
        """Black-box ``x -> y`` drawing noise from ``rng``."""

        def f(x):
            return float(self.sample(np.atleast_2d(x), rng)[0])

        return f


FUNCTIONS: dict[str, TestFunction] = {
    "parabola": TestFunction("parabola", parabola, ((-3.0, 3.0),), 0.2),
    "sincauchy": TestFunction("sincauchy", sincauchy, ((0.0, 7.0),), 0.1),
    "exp2d": TestFunction("exp2d", exp2d, ((-2.0, 6.0), (-2.0, 6.0)), 1e-3),
    "friedman": TestFunction("friedman", friedman, ((0.0, 1.0),) * 5, 1.0),
}


def get(name: str) -> TestFunction:
    try:
        return FUNCTIONS[name]
    except KeyError:
        raise ValueError(f"unknown test function {name!r}; choose from {sorted(FUNCTIONS)}") from None


def eval_test_function(name: str, X) -> np.ndarray:
    """Noiseless mean of the named function at the rows of ``X``."""
    return get(name)(X)


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} vs {truth.shape[0]}")
    if pred.shape[0] == 0:
        raise ValueError("rmse of empty vectors")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))
