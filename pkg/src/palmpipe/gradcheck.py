"""Central finite-difference gradient checking, shared by tests and the
CLI self-test."""

from __future__ import annotations

from typing import Callable

import numpy as np


def finite_difference(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at
    a time. ``x`` is not modified."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += eps
        xm = x.copy()
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2.0 * eps)
        it.iternext()
    return g


def max_rel_error(analytic: np.ndarray, fd: np.ndarray, atol: float = 1e-4) -> float:
    """Worst-case relative disagreement |a - b| / (atol + max(|a|, |b|)).

    The additive floor absorbs central-difference roundoff, about
    loss_magnitude * 2e-10 at step 1e-6, which would otherwise dominate
    near-zero entries; sensitivity on entries of ordinary size is kept.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(fd, dtype=np.float64).ravel()
    denom = atol + np.maximum(np.abs(a), np.abs(b))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def assert_gradients_close(
    analytic: np.ndarray, fd: np.ndarray, rtol: float = 1e-4, atol: float = 1e-4
) -> None:
    err = max_rel_error(analytic, fd, atol=atol)
    if err > rtol:
        raise AssertionError(f"gradient mismatch: max relative error {err:.3e} > {rtol:.1e}")
