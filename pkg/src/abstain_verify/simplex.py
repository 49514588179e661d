"""Entropic mirror descent (exponentiated gradient) on the probability simplex."""
from __future__ import annotations

from typing import Callable, Tuple

import numpy as np

DEFAULT_NU = 1e-3
DEFAULT_ITERS = 500
INTERIOR_DELTA = 1e-6

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def check_simplex(eta: np.ndarray, atol: float = 1e-12) -> np.ndarray:
    eta = np.asarray(eta, dtype=np.float64)
    if eta.ndim < 1 or eta.shape[-1] < 1:
        raise ValueError("simplex point needs at least one coordinate")
    if np.any(eta < 0) or np.any(np.abs(eta.sum(axis=-1) - 1.0) > atol):
        raise ValueError(f"not a point of the probability simplex: {eta}")
    return eta


def initial_point(size: int, mode: str = "interior", delta: float = INTERIOR_DELTA) -> np.ndarray:
    """Starting eta of length ``size`` (= M+1).

    ``vertex`` puts all mass on coordinate 0 (the true class). Multiplicative
    updates never move mass off a vertex, so ``interior`` shifts ``delta`` to
    each abstain coordinate instead. ``uniform`` is the barycenter.
    """
    if mode == "vertex":
        eta = np.zeros(size)
        eta[0] = 1.0
    elif mode == "interior":
        eta = np.full(size, delta)
        eta[0] = 1.0 - delta * (size - 1)
    elif mode == "uniform":
        eta = np.full(size, 1.0 / size)
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return eta


def eg_step(eta: np.ndarray, grad: np.ndarray, nu: float) -> np.ndarray:
    """One exponentiated-gradient descent step, ``eta_i * exp(-2 nu g_i)`` renormalized.

    Accepts stacked points along the last axis. Zero coordinates stay zero.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if np.any(np.isnan(grad)):
        raise ValueError("gradient contains NaN")
    if nu <= 0:
        raise ValueError("step size must be positive")
    expo = -2.0 * nu * grad
    expo = expo - expo.max(axis=-1, keepdims=True)
    w = eta * np.exp(expo)
    s = w.sum(axis=-1, keepdims=True)
    if np.any(s <= 0):
        raise FloatingPointError("exponentiated update underflowed to zero mass")
    return w / s


def minimize_over_simplex(J: Objective, eta0: np.ndarray, nu: float = DEFAULT_NU,
                          iters: int = DEFAULT_ITERS, stop_below: float | None = None):
    """Mirror descent on a convex ``J`` returning the best iterate seen.

    ``J`` maps a simplex point to ``(value, subgradient)``. With
    ``stop_below`` set, returns as soon as a value ``<= stop_below`` appears.
    Takes at most ``iters`` steps (``iters + 1`` evaluations). Returns
    ``(eta, value, steps_taken)``.
    """
    if iters < 1:
        raise ValueError("need at least one iteration")
    eta = check_simplex(eta0, atol=1e-9)
    best_eta, best_val = eta, np.inf
    steps = 0
    while True:
        val, g = J(eta)
        if val < best_val:
            best_eta, best_val = eta, float(val)
        if stop_below is not None and best_val <= stop_below:
            break
        if eta.size == 1 or steps == iters:
            break
        eta = eg_step(eta, g, nu)
        steps += 1
    return best_eta, best_val, steps
