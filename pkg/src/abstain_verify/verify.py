"""IBP certification for networks with several abstain classes.

For a target class ``k`` the rows ``c_m = e_{a_m} - e_k`` (with ``a_0 = y``)
are mixed by a simplex weight ``eta``. The function

    J_k(eta) = max over the IBP box on z_{L-1} of  -c(eta) . (W_L z + b_L)

is convex and piecewise linear in ``eta``, and ``-min_eta J_k(eta)`` lower
bounds ``min_x max_m c_m . z_L(x)``. Target ``k`` is certified when that
bound is nonnegative.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import simplex
from .ibp import InputRegion, LayerBounds, propagate
from .nn import Network, ShapeError, predict


def objective_rows(net: Network, y: int, k: int) -> np.ndarray:
    """Rows ``c_{a_m k}`` for m = 0..M, shape (M+1, K+M)."""
    K, M = net.num_classes, net.num_abstain
    if not (0 <= y < K):
        raise ValueError(f"true label {y} is not a regular class")
    if not (0 <= k < K) or k == y:
        raise ValueError(f"target {k} must be a regular class different from {y}")
    rows = np.zeros((M + 1, K + M))
    rows[:, k] = -1.0
    rows[0, y] += 1.0
    for m in range(M):
        rows[m + 1, K + m] += 1.0
    return rows


def inner_max(lower, upper, weight, bias, c):
    """Maximize ``-c . (W z + b)`` over the box ``lower <= z <= upper``.

    Returns ``(value, z_star)`` with ``z_star_j = lower_j`` where
    ``(W^T c)_j >= 0`` and ``upper_j`` otherwise.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1] != weight.shape[0] or np.shape(lower)[-1] != weight.shape[1]:
        raise ShapeError("objective, weight and box dimensions disagree")
    v = c @ weight
    z = np.where(v >= 0, lower, upper)
    value = -(v * z).sum(axis=-1) - c @ bias
    return value, z


@dataclass
class JContext:
    lower: np.ndarray
    upper: np.ndarray
    weight: np.ndarray
    bias: np.ndarray
    rows: np.ndarray

    @classmethod
    def build(cls, net: Network, bounds: LayerBounds, y: int, k: int) -> "JContext":
        lo, hi = bounds.penultimate
        last = net.layers[-1]
        return cls(lo, hi, last.weight, last.bias, objective_rows(net, y, k))


def J_value(eta, ctx: JContext):
    """``(J_k(eta), subgradient)``; the subgradient follows the maximizer (Danskin)."""
    eta = np.asarray(eta, dtype=np.float64)
    c = eta @ ctx.rows
    value, z = inner_max(ctx.lower, ctx.upper, ctx.weight, ctx.bias, c)
    logits = z @ ctx.weight.T + ctx.bias
    return float(value), -(ctx.rows @ logits)


@dataclass
class TargetResult:
    k: int
    bound: float
    verified: bool
    eta: np.ndarray
    alpha: Optional[list] = None
    beta: Optional[list] = None


@dataclass
class VerificationCertificate:
    y: int
    predicted: int
    targets: List[TargetResult] = field(default_factory=list)
    method: str = "ibp"

    @property
    def overall_verified(self) -> bool:
        return all(t.verified for t in self.targets)

    @property
    def min_bound(self) -> float:
        return min((t.bound for t in self.targets), default=np.inf)

    def to_record(self, index: int, witnesses: bool = False) -> dict:
        per_target = []
        for t in self.targets:
            entry = {"k": t.k, "bound": t.bound, "verified": t.verified}
            if witnesses:
                entry["eta"] = [float(e) for e in t.eta]
                if t.alpha is not None:
                    entry["alpha"] = t.alpha
                if t.beta is not None:
                    entry["beta"] = t.beta
            per_target.append(entry)
        rec = {
            "index": index,
            "y": self.y,
            "predicted": self.predicted,
            "overall_verified": self.overall_verified,
            "per_target": per_target,
        }
        if self.method != "ibp":
            rec["method"] = self.method
        return rec


@dataclass(frozen=True)
class SimplexSettings:
    nu: float = simplex.DEFAULT_NU
    iters: int = simplex.DEFAULT_ITERS
    init: str = "interior"
    early_exit: bool = True


def _targets(net: Network, y: int) -> List[int]:
    return [k for k in range(net.num_classes) if k != y]


def minimize_J(ctx: JContext, settings: SimplexSettings, eta0=None):
    if eta0 is None:
        eta0 = simplex.initial_point(ctx.rows.shape[0], settings.init)
    stop = 0.0 if settings.early_exit else None
    return simplex.minimize_over_simplex(lambda e: J_value(e, ctx), eta0, settings.nu,
                                         settings.iters, stop_below=stop)


def verify_ibp(net: Network, region: InputRegion, y: int,
               settings: SimplexSettings = SimplexSettings(),
               bounds: LayerBounds | None = None) -> VerificationCertificate:
    """Certify every target ``k != y`` by minimizing ``J_k`` over the simplex."""
    if net.num_classes < 2:
        raise ValueError("verification needs at least two regular classes")
    bounds = propagate(net, region) if bounds is None else bounds
    cert = VerificationCertificate(y=int(y), predicted=int(predict(net, region.center)))
    for k in _targets(net, y):
        ctx = JContext.build(net, bounds, y, k)
        eta, val, _ = minimize_J(ctx, settings)
        bound = -val
        cert.targets.append(TargetResult(k, float(bound), bool(bound >= 0.0), eta))
    return cert


def classical_ibp_margin(net: Network, region: InputRegion, y: int, k: int) -> float:
    """Lower bound on ``z_y - z_k`` from the IBP box on ``z_{L-1}``, without abstain classes."""
    bounds = propagate(net, region)
    lo, hi = bounds.penultimate
    last = net.layers[-1]
    c = np.zeros(net.output_dim)
    c[y], c[k] = 1.0, -1.0
    v = last.weight.T @ c
    mid, rad = (hi + lo) / 2.0, (hi - lo) / 2.0
    return float(v @ mid - np.abs(v) @ rad + c @ last.bias)


# -- batched verification -------------------------------------------------

def verify_ibp_batch(net: Network, X: np.ndarray, labels: np.ndarray, eps: float,
                     settings: SimplexSettings = SimplexSettings(),
                     mask: np.ndarray | None = None, clip=None) -> List[VerificationCertificate]:
    """Vectorized ``verify_ibp`` over samples and targets; same iterates, same results."""
    from .ibp import propagate_batch

    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    labels = np.asarray(labels, dtype=int)
    n = X.shape[0]
    K, M = net.num_classes, net.num_abstain
    if K < 2:
        raise ValueError("verification needs at least two regular classes")
    if n == 0:
        return []
    region_lo, region_hi = _batch_box(X, eps, mask, clip)
    lowers, uppers, _ = propagate_batch(net, region_lo, region_hi)
    if net.depth == 1:
        lo, hi = region_lo, region_hi
    else:
        lo, hi = lowers[-2], uppers[-2]
    best_eta, best_val = solve_J_batch(net, lo, hi, labels, settings)
    preds = predict(net, X)
    certs = []
    for i in range(n):
        cert = VerificationCertificate(y=int(labels[i]), predicted=int(preds[i]))
        for slot, k in enumerate(_targets(net, labels[i])):
            bound = -float(best_val[i, slot])
            cert.targets.append(TargetResult(k, bound, bool(bound >= 0.0), best_eta[i, slot].copy()))
        certs.append(cert)
    return certs


def _batch_box(X, eps, mask, clip):
    rad = np.full(X.shape[1], float(eps))
    if mask is not None:
        rad[~np.asarray(mask, dtype=bool)] = 0.0
    lo, hi = X - rad, X + rad
    if clip is not None:
        lo, hi = np.clip(lo, *clip), np.clip(hi, *clip)
    return lo, hi


def target_table(labels: np.ndarray, K: int) -> np.ndarray:
    """(n, K-1) regular targets ``k != y`` per sample, in increasing order."""
    labels = np.asarray(labels, dtype=int)
    ks = np.arange(K - 1)[None, :]
    return ks + (ks >= labels[:, None])


def batch_rows(labels: np.ndarray, K: int, M: int) -> np.ndarray:
    """Objective rows for every sample and target, shape (n, K-1, M+1, K+M)."""
    labels = np.asarray(labels, dtype=int)
    n = labels.shape[0]
    tk = target_table(labels, K)
    rows = np.zeros((n, K - 1, M + 1, K + M))
    ii = np.arange(n)[:, None]
    jj = np.arange(K - 1)[None, :]
    for m in range(M + 1):
        rows[ii, jj, m, tk] = -1.0
    rows[ii, jj, 0, labels[:, None]] += 1.0
    for m in range(M):
        rows[:, :, m + 1, K + m] += 1.0
    return rows


def J_batch(eta, rows, lo, hi, weight, bias):
    """Vectorized ``J_k`` values and subgradients.

    ``eta`` (n, T, M+1), ``rows`` (n, T, M+1, K+M), ``lo``/``hi`` (n, d).
    Also returns the maximizers ``z`` (n, T, d).
    """
    c = np.einsum("ntm,ntmj->ntj", eta, rows)
    v = c @ weight
    z = np.where(v >= 0, lo[:, None, :], hi[:, None, :])
    logits = z @ weight.T + bias
    value = -np.einsum("ntj,ntj->nt", c, logits)
    grad = -np.einsum("ntmj,ntj->ntm", rows, logits)
    return value, grad, z


def solve_J_batch(net: Network, lo, hi, labels, settings: SimplexSettings, eta0=None):
    """Mirror descent on every ``J_k`` of a batch; returns best ``(eta, value)``."""
    K, M = net.num_classes, net.num_abstain
    n = lo.shape[0]
    rows = batch_rows(labels, K, M)
    W, b = net.layers[-1].weight, net.layers[-1].bias
    if eta0 is None:
        eta = np.broadcast_to(simplex.initial_point(M + 1, settings.init), (n, K - 1, M + 1)).copy()
    else:
        eta = np.array(eta0, dtype=np.float64)
    best_eta = eta.copy()
    best_val = np.full((n, K - 1), np.inf)
    active = np.ones((n, K - 1), dtype=bool)
    for step in range(settings.iters + 1):
        val, grad, _ = J_batch(eta, rows, lo, hi, W, b)
        better = (val < best_val) & active
        best_val = np.where(better, val, best_val)
        best_eta[better] = eta[better]
        if settings.early_exit:
            active &= ~(best_val <= 0.0)
        if step == settings.iters or M == 0 or not active.any():
            break
        new = simplex.eg_step(eta, grad, settings.nu)
        eta = np.where(active[..., None], new, eta)
    return best_eta, best_val
