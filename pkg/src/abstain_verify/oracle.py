"""Ground truth for small instances: grid enumeration, PGD, and the 1-D Laplace example."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .ibp import InputRegion
from .nn import Network, backward, forward

MAX_GRID_DIM = 3


@dataclass
class AttackResult:
    found: bool
    x_adv: Optional[np.ndarray] = None
    target: Optional[int] = None
    margin: float = -np.inf


def accepted_columns(net: Network, y: int) -> np.ndarray:
    """Columns whose win counts as correct: the true class and every abstain class."""
    return np.concatenate([[y], net.abstain_indices]).astype(int)


def violation(net: Network, X, y: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per row: ``max_k z_k - max(z_y, z_a...)`` over regular ``k != y`` and its argmax.

    Positive means the condition fails at that input for the returned target.
    """
    Z = np.atleast_2d(forward(net, X))
    accept = Z[:, accepted_columns(net, y)].max(axis=1)
    others = Z[:, : net.num_classes].copy()
    others[:, y] = -np.inf
    k = others.argmax(axis=1)
    return others[np.arange(len(Z)), k] - accept, k


def grid_points(region: InputRegion, resolution: float | None = None) -> np.ndarray:
    lo, hi = region.lower, region.upper
    free = np.flatnonzero(hi > lo)
    if free.size > MAX_GRID_DIM:
        raise ValueError(f"grid check supports at most {MAX_GRID_DIM} perturbed dims, got {free.size}")
    if free.size == 0:
        return region.center[None, :].copy()
    if resolution is None:
        resolution = 0.02 * region.eps
    axes = []
    for j in free:
        n = int(np.ceil((hi[j] - lo[j]) / resolution)) + 1
        axes.append(np.linspace(lo[j], hi[j], max(n, 2)))
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, free.size)
    pts = np.broadcast_to(region.center, (mesh.shape[0], region.center.size)).copy()
    pts[:, free] = mesh
    return pts


def find_counterexample(net: Network, region: InputRegion, y: int, resolution: float | None = None,
                        pgd_steps: int = 50, pgd_restarts: int = 10,
                        rng: np.random.Generator | None = None, chunk: int = 200_000) -> AttackResult:
    """Search the grid and PGD endpoints for a strict violation."""
    pts = grid_points(region, resolution)
    best = AttackResult(False)
    for start in range(0, len(pts), chunk):
        block = pts[start:start + chunk]
        v, k = violation(net, block, y)
        i = int(np.argmax(v))
        if v[i] > best.margin:
            best = AttackResult(bool(v[i] > 0), block[i].copy(), int(k[i]), float(v[i]))
    if not best.found and region.eps > 0:
        atk = pgd_attack(net, region, y, pgd_steps, pgd_restarts, rng)
        if atk.found:
            return atk
    return best


def exact_check(net: Network, region: InputRegion, y: int, resolution: float | None = None,
                pgd_steps: int = 50, pgd_restarts: int = 10, rng: np.random.Generator | None = None) -> bool:
    """Empirical check of the abstain-aware robustness condition.

    ``False`` comes with a concrete counterexample; ``True`` only means the
    grid and PGD found none.
    """
    return not find_counterexample(net, region, y, resolution, pgd_steps, pgd_restarts, rng).found


def pgd_attack(net: Network, region: InputRegion, y: int, steps: int = 50, restarts: int = 10,
               rng: np.random.Generator | None = None, step_size: float | None = None) -> AttackResult:
    """Signed-gradient ascent on the violation margin, projected onto the box.

    Restart 0 starts at the center, the others uniformly in the box.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    if step_size is None:
        step_size = 2.5 * region.eps / steps
    X = region.sample(max(restarts, 1), rng)
    X[0] = region.project(region.center)
    accept_cols = accepted_columns(net, y)
    best = AttackResult(False)
    rows = np.arange(len(X))
    for it in range(steps + 1):
        Z = np.atleast_2d(forward(net, X))
        acc = Z[:, accept_cols]
        m = accept_cols[acc.argmax(axis=1)]
        others = Z[:, : net.num_classes].copy()
        others[:, y] = -np.inf
        k = others.argmax(axis=1)
        v = others[rows, k] - Z[rows, m]
        i = int(np.argmax(v))
        if v[i] > best.margin:
            best = AttackResult(bool(v[i] > 0), X[i].copy(), int(k[i]), float(v[i]))
        if best.found or it == steps:
            break
        up = np.zeros_like(Z)
        up[rows, k] += 1.0
        up[rows, m] -= 1.0
        _, g = backward(net, X, up)
        X = region.project(X + step_size * np.sign(g))
    if not best.found:
        best = AttackResult(False, best.x_adv, best.target, best.margin)
    return best


# -- 1-D Laplace example ------------------------------------------------------

REAL_WEIGHT = 1.0 / 3.0
ADV_WEIGHT = 2.0 / 3.0


def laplace_cdf(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 0, 0.5 * np.exp(np.minimum(x, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(x, 0.0)))


def _adv_cdf(x):
    return 0.5 * (laplace_cdf(x - 10.0) + laplace_cdf(x + 10.0))


def laplace_demo(mode: str, t) -> float:
    """Misclassification rate of the 1-D real-vs-adversary example.

    ``single``: real iff ``x < t``. ``double``: real iff ``t1 < x < t2``.
    Real data is standard Laplace (weight 1/3), adversarial data an even
    mixture of Laplace at +-10 (weight 2/3).
    """
    if mode == "single":
        t = float(t)
        return float(REAL_WEIGHT * (1.0 - laplace_cdf(t)) + ADV_WEIGHT * _adv_cdf(t))
    if mode == "double":
        t1, t2 = map(float, t)
        if t2 < t1:
            t1, t2 = t2, t1
        real_err = laplace_cdf(t1) + 1.0 - laplace_cdf(t2)
        adv_err = _adv_cdf(t2) - _adv_cdf(t1)
        return float(REAL_WEIGHT * real_err + ADV_WEIGHT * adv_err)
    raise ValueError(f"mode must be 'single' or 'double', got {mode!r}")


def degenerate_loss(z):
    """Loss of the two-abstain model when both abstain thresholds coincide at ``z``."""
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-z) / 6.0 + 1.0 / 3.0 - np.exp(-z - 10.0) / 6.0 + np.exp(z - 10.0) / 6.0


def laplace_local_min_scan(z_range=(0.0, 10.0), resolution: float = 1e-3) -> List[float]:
    """Grid locations of strict-left local minima of ``degenerate_loss``."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    lo, hi = z_range
    z = np.arange(lo, hi + resolution / 2, resolution)
    h = degenerate_loss(z)
    idx = np.flatnonzero((h[1:-1] < h[:-2]) & (h[1:-1] <= h[2:])) + 1
    return [float(z[i]) for i in idx]


def laplace_table(single_t: float = 5.0, double_t=(-5.0, 5.0)) -> List[Tuple[str, str, float]]:
    rows = [
        ("single", f"t={single_t:g}", laplace_demo("single", single_t)),
        ("double", f"t=({double_t[0]:g},{double_t[1]:g})", laplace_demo("double", double_t)),
    ]
    for zmin in laplace_local_min_scan():
        rows.append(("degenerate local min", f"z={zmin:.3f}", float(degenerate_loss(zmin))))
    return rows


def corners(lower, upper):
    """All vertices of a box (exponential; for small dims only)."""
    lower, upper = np.asarray(lower), np.asarray(upper)
    return np.array([np.where(bits, upper, lower)
                     for bits in itertools.product([False, True], repeat=lower.size)])


# -- batched attacks ----------------------------------------------------------

def _box_rows(X, eps, mask=None):
    rad = np.full(X.shape[1], float(eps))
    if mask is not None:
        rad[~np.asarray(mask, dtype=bool)] = 0.0
    return X - rad, X + rad


def _batched_ascent(net: Network, X, lo, hi, objective, steps: int, restarts: int,
                    rng: np.random.Generator, step_size: float):
    """Signed-gradient ascent of ``objective(Z) -> (value, dvalue/dZ)`` per row; best point per row."""
    n = len(X)
    best_x = X.copy()
    best_v = objective(np.atleast_2d(forward(net, X)))[0]
    for r in range(restarts):
        cur = X.copy() if r == 0 else lo + (hi - lo) * rng.random(X.shape)
        for it in range(steps + 1):
            v, dZ = objective(np.atleast_2d(forward(net, cur)))
            better = v > best_v
            best_v = np.where(better, v, best_v)
            best_x[better] = cur[better]
            if it == steps:
                break
            _, g = backward(net, cur, dZ)
            cur = np.clip(cur + step_size * np.sign(g.reshape(n, -1)), lo, hi)
    return best_x, best_v


def adversarial_examples(net: Network, X, y, eps: float, steps: int = 50, restarts: int = 1,
                         rng: np.random.Generator | None = None, mask=None) -> np.ndarray:
    """Untargeted PGD pushing any other output (regular or abstain) above the true class."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=int)
    rng = np.random.default_rng(0) if rng is None else rng
    rows = np.arange(len(y))
    if eps == 0:
        return X.copy()

    def objective(Z):
        other = Z.copy()
        other[rows, y] = -np.inf
        j = other.argmax(axis=1)
        dZ = np.zeros_like(Z)
        dZ[rows, j] = 1.0
        dZ[rows, y] -= 1.0
        return other[rows, j] - Z[rows, y], dZ

    lo, hi = _box_rows(X, eps, mask)
    return _batched_ascent(net, X, lo, hi, objective, steps, restarts, rng, 2.5 * eps / steps)[0]


def abstain_utilization(net: Network, X, y, eps_values, steps: int = 50, restarts: int = 1,
                        rng: np.random.Generator | None = None, mask=None) -> np.ndarray:
    """Adversarial examples assigned to each abstain class, summed over the radii in ``eps_values``."""
    counts = np.zeros(net.num_abstain, dtype=int)
    if net.num_abstain == 0:
        return counts
    rng = np.random.default_rng(0) if rng is None else rng
    K = net.num_classes
    for eps in eps_values:
        adv = adversarial_examples(net, X, y, eps, steps, restarts, rng, mask)
        pred = np.atleast_1d(np.argmax(np.atleast_2d(forward(net, adv)), axis=1))
        counts += np.bincount(pred[pred >= K] - K, minlength=net.num_abstain)
    return counts


def robust_abstain_loss(Z, y: int, K: int):
    """``logsumexp([0, z_k - max_m z_{a_m}])`` over regular ``k != y``, with ``a_0 = y``; and dloss/dZ."""
    Z = np.atleast_2d(Z)
    rows = np.arange(len(Z))
    acc_cols = np.concatenate([[y], np.arange(K, Z.shape[1])]).astype(int)
    acc = Z[:, acc_cols]
    m = acc_cols[acc.argmax(axis=1)]
    others = [k for k in range(K) if k != y]
    diff = Z[:, others] - Z[rows, m][:, None]
    aug = np.concatenate([np.zeros((len(Z), 1)), diff], axis=1)
    top = aug.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(aug - top).sum(axis=1))
    p = np.exp(diff - lse[:, None])
    dZ = np.zeros_like(Z)
    dZ[:, others] = p
    dZ[rows, m] -= p.sum(axis=1)
    return lse, dZ


def robust_abstain_loss_pgd(net: Network, region: InputRegion, y: int, steps: int = 50,
                            restarts: int = 10, rng: np.random.Generator | None = None) -> float:
    """PGD lower estimate of the worst-case abstain-aware loss over the region."""
    rng = np.random.default_rng(0) if rng is None else rng
    K = net.num_classes
    X = region.sample(max(restarts, 1), rng)
    X[0] = region.project(region.center)
    lo = np.broadcast_to(region.lower, X.shape)
    hi = np.broadcast_to(region.upper, X.shape)
    step = 2.5 * region.eps / steps if region.eps > 0 else 0.0
    _, v = _batched_ascent(net, X, lo, hi, lambda Z: robust_abstain_loss(Z, y, K), steps, 1, rng, step)
    return float(v.max())
