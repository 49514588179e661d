"""Linear-relaxation (alpha/beta-CROWN style) bounds with multiple abstain classes.

A backward pass turns ``c . z_L`` into an affine function of the input that
lower-bounds it over the region: each hidden ReLU is replaced by a linear
lower bound (slope ``alpha``) where its backward coefficient is
nonnegative, and by the chord ``u/(u-l) (z - l)`` where it is negative.
Split neurons contribute Lagrangian terms ``beta * S * z_hat``.

Intermediate pre-activation bounds come from interval propagation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import simplex
from .ibp import InputRegion, LayerBounds, Splits, propagate
from .nn import Network, predict
from .verify import (JContext, SimplexSettings, TargetResult, VerificationCertificate,
                     minimize_J, objective_rows)


@dataclass
class RelaxationState:
    """Per-target optimization variables.

    ``splits`` maps ``(hidden_layer, neuron)`` to +1 (branch ``z >= 0``) or -1
    (branch ``z < 0``); ``S`` is the matching sign matrix diagonal, -1 for an
    active split and +1 for an inactive one.
    """

    alpha: List[np.ndarray]
    beta: List[np.ndarray]
    splits: Splits = field(default_factory=dict)

    @classmethod
    def initial(cls, net: Network, splits: Splits | None = None, alpha: float = 0.0) -> "RelaxationState":
        widths = [layer.out_dim for layer in net.layers[:-1]]
        return cls([np.full(w, float(alpha)) for w in widths],
                   [np.zeros(w) for w in widths], dict(splits or {}))

    def S(self, net: Network) -> List[np.ndarray]:
        out = [np.zeros(layer.out_dim) for layer in net.layers[:-1]]
        for (h, j), sign in self.splits.items():
            out[h][j] = -1.0 if sign > 0 else 1.0
        return out

    def copy(self) -> "RelaxationState":
        return RelaxationState([a.copy() for a in self.alpha], [b.copy() for b in self.beta],
                               dict(self.splits))


@dataclass
class CrownCoefficients:
    """``g(x) = (a + sum_i P_i^T beta_i) . x + sum_i q_i . beta_i + d``."""

    a: np.ndarray
    P: List[np.ndarray]
    q: List[np.ndarray]
    d: float
    # relaxation side chosen per hidden neuron (True: lower line / alpha side)
    signs: List[np.ndarray]

    def linear_term(self, beta: Sequence[np.ndarray]) -> np.ndarray:
        w = self.a.copy()
        for P_i, b_i in zip(self.P, beta):
            w += P_i.T @ b_i
        return w

    def constant(self, beta: Sequence[np.ndarray]) -> float:
        return float(self.d + sum(q_i @ b_i for q_i, b_i in zip(self.q, beta)))

    def value_at(self, x, beta) -> float:
        return float(self.linear_term(beta) @ np.asarray(x, dtype=np.float64) + self.constant(beta))


class MissingBoundsError(ValueError):
    pass


def _relaxation(lo, hi, alpha, lower_side):
    """Slope and intercept of the ReLU relaxation for each neuron."""
    active = lo >= 0
    unstable = (lo < 0) & (hi > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        chord = np.where(unstable, hi / (hi - lo), 0.0)
        icpt = np.where(unstable, -hi * lo / (hi - lo), 0.0)
    use_alpha = unstable & lower_side
    d = np.where(active, 1.0, np.where(unstable, np.where(lower_side, alpha, chord), 0.0))
    t = np.where(unstable & ~lower_side, icpt, 0.0)
    return d, t, use_alpha


def _check_bounds(net: Network, bounds: LayerBounds):
    if len(bounds.pre_lower) != net.depth - 1:
        raise MissingBoundsError("pre-activation bounds for every hidden layer are required")


def backsub(net: Network, bounds: LayerBounds, state: RelaxationState, c: np.ndarray,
            signs: List[np.ndarray] | None = None, grads: bool = False):
    """Lower bound of ``c . z_L`` over the input box of ``bounds``.

    Returns ``(bound, info)``; with ``grads`` the info dict carries gradients
    of the bound w.r.t. alpha, beta and ``c`` (relaxation sides held fixed).
    ``signs`` forces the relaxation side per neuron instead of reading it off
    the backward coefficient (used for linearity checks; may be unsound).
    """
    _check_bounds(net, bounds)
    c = np.asarray(c, dtype=np.float64)
    S = state.S(net)
    last = net.layers[-1]
    A = c @ last.weight
    const = float(c @ last.bias)
    saved = []
    used_signs = [None] * (net.depth - 1)
    for h in reversed(range(net.depth - 1)):
        lo, hi = bounds.pre_lower[h], bounds.pre_upper[h]
        side = (A >= 0) if signs is None else signs[h]
        used_signs[h] = side
        d, t, use_alpha = _relaxation(lo, hi, state.alpha[h], side)
        const += float(A @ t)
        lam = A * d + state.beta[h] * S[h]
        layer = net.layers[h]
        const += float(lam @ layer.bias)
        saved.append((h, A, d, t, use_alpha))
        A = lam @ layer.weight
    lo_in, hi_in = bounds.input_lower, bounds.input_upper
    mid, rad = (hi_in + lo_in) / 2.0, (hi_in - lo_in) / 2.0
    bound = float(A @ mid - np.abs(A) @ rad + const)
    info = {"signs": used_signs, "A0": A}
    if not grads:
        return bound, info

    g_alpha = [np.zeros_like(a) for a in state.alpha]
    g_beta = [np.zeros_like(b) for b in state.beta]
    gA = mid - np.sign(A) * rad
    for h, A_h, d, t, use_alpha in reversed(saved):
        layer = net.layers[h]
        glam = layer.weight @ gA + layer.bias
        g_alpha[h] = np.where(use_alpha, glam * A_h, 0.0)
        g_beta[h] = glam * S[h]
        gA = glam * d + t
    info["g_alpha"] = g_alpha
    info["g_beta"] = g_beta
    info["g_c"] = last.weight @ gA + last.bias
    return bound, info


def crown_coeffs(net: Network, bounds: LayerBounds, state: RelaxationState, c,
                 signs: List[np.ndarray] | None = None) -> CrownCoefficients:
    """Explicit ``a, P, q, d`` of the bound for fixed relaxation sides.

    Sides default to those the backward pass picks for ``c`` under ``state``.
    """
    c = np.asarray(c, dtype=np.float64)
    if signs is None:
        _, info = backsub(net, bounds, state, c)
        signs = info["signs"]
    # forward composition of the relaxed affine maps z_hat_h ~ M_h x + m_h
    M_maps, m_maps = [], []
    Mx = net.layers[0].weight.copy()
    mx = net.layers[0].bias.copy()
    for h in range(net.depth - 1):
        M_maps.append(Mx)
        m_maps.append(mx)
        d, t, _ = _relaxation(bounds.pre_lower[h], bounds.pre_upper[h], state.alpha[h], signs[h])
        W, b = net.layers[h + 1].weight, net.layers[h + 1].bias
        Mx = W @ (d[:, None] * Mx)
        mx = W @ (d * mx + t) + b
    S = state.S(net)
    P = [S[h][:, None] * M_maps[h] for h in range(net.depth - 1)]
    q = [S[h] * m_maps[h] for h in range(net.depth - 1)]
    return CrownCoefficients(a=c @ Mx, P=P, q=q, d=float(c @ mx), signs=list(signs))


def g_lower_bound(coeffs: CrownCoefficients, region: InputRegion, state: RelaxationState) -> float:
    """Minimum of the affine bound over the input box (l1-dual closed form)."""
    w = coeffs.linear_term(state.beta)
    lo, hi = region.lower, region.upper
    mid, rad = (hi + lo) / 2.0, (hi - lo) / 2.0
    return float(w @ mid - np.abs(w) @ rad + coeffs.constant(state.beta))


def G_multi(net: Network, region: InputRegion, y: int, k: int, state: RelaxationState,
            eta, bounds: LayerBounds | None = None) -> float:
    """Bound for target ``k`` from one backward pass with the mixed row ``c_k(eta)``."""
    bounds = propagate(net, region, state.splits) if bounds is None else bounds
    rows = objective_rows(net, y, k)
    c = simplex.check_simplex(eta, atol=1e-9) @ rows
    return backsub(net, bounds, state, c)[0]


def G_separate(net: Network, bounds: LayerBounds, rows: np.ndarray, state: RelaxationState,
               eta, signs) -> float:
    """``sum_m eta_m g_m`` with every pass using the same relaxation sides."""
    return float(sum(e * backsub(net, bounds, state, r, signs=signs)[0] for e, r in zip(eta, rows)))


# -- optimization -----------------------------------------------------------

@dataclass(frozen=True)
class CrownConfig:
    outer_iters: int = 20      # T: alpha updates
    inner_iters: int = 5       # T0: beta / eta updates per alpha update
    alpha_step: float = 0.1
    step: float = 0.05         # gamma: beta and eta step size
    ibp: SimplexSettings = SimplexSettings()
    early_exit: bool = True


def _domain_empty(bounds: LayerBounds) -> bool:
    return any(np.any(lo > hi) for lo, hi in zip(bounds.pre_lower, bounds.pre_upper))


def _adaptive_alpha(bounds: LayerBounds) -> List[np.ndarray]:
    return [(hi > -lo).astype(float) for lo, hi in zip(bounds.pre_lower, bounds.pre_upper)]


def optimize_target(net: Network, bounds: LayerBounds, rows: np.ndarray, config: CrownConfig,
                    splits: Splits | None = None, eta0=None):
    """Alternating ascent on ``(alpha, beta, eta)``; returns the best bound seen and its witness."""
    if _domain_empty(bounds):
        return np.inf, None, None
    if eta0 is None:
        eta0 = simplex.initial_point(rows.shape[0], "uniform")
    eta = np.array(eta0, dtype=np.float64)
    if rows.shape[0] > 1 and np.any(eta <= 0):
        # multiplicative updates cannot revive zero coordinates
        eta = 0.99 * eta + 0.01 / eta.size

    state = RelaxationState.initial(net, splits)
    best = (-np.inf, None, None)

    def evaluate(st, e):
        nonlocal best
        val, info = backsub(net, bounds, st, e @ rows, grads=True)
        if val > best[0]:
            best = (val, st.copy(), e.copy())
        return val, info

    start_val, _ = evaluate(state, np.asarray(eta0, dtype=np.float64))
    cand = RelaxationState(_adaptive_alpha(bounds), [b.copy() for b in state.beta], dict(state.splits))
    cand_val, _ = evaluate(cand, eta)
    if cand_val > start_val:
        state = cand
    for _ in range(config.outer_iters):
        if config.early_exit and best[0] >= 0:
            break
        _, info = evaluate(state, eta)
        state.alpha = [np.clip(a + config.alpha_step * g, 0.0, 1.0)
                       for a, g in zip(state.alpha, info["g_alpha"])]
        for _ in range(config.inner_iters):
            _, info = evaluate(state, eta)
            if config.early_exit and best[0] >= 0:
                break
            state.beta = [np.maximum(b + config.step * g, 0.0) for b, g in zip(state.beta, info["g_beta"])]
            if rows.shape[0] > 1:
                g_eta = rows @ info["g_c"]
                eta = simplex.eg_step(eta, -g_eta, config.step)
    evaluate(state, eta)
    return best


def verify_crown(net: Network, region: InputRegion, y: int, config: CrownConfig = CrownConfig(),
                 domains: Sequence[Splits] | None = None, witnesses: bool = False) -> VerificationCertificate:
    """Certify each target ``k != y`` with the optimized linear-relaxation bound.

    ``domains`` is a list of split assignments whose union must cover the
    region; the certified bound is the minimum over domains. ``eta`` starts
    from the IBP witness on each domain, so the result never falls below the
    IBP bound at that witness.
    """
    if net.num_classes < 2:
        raise ValueError("verification needs at least two regular classes")
    domains = [{}] if not domains else list(domains)
    domain_bounds = [propagate(net, region, s) for s in domains]
    cert = VerificationCertificate(y=int(y), predicted=int(predict(net, region.center)), method="crown")
    for k in range(net.num_classes):
        if k == y:
            continue
        rows = objective_rows(net, y, k)
        worst = (np.inf, None, None)
        for splits, bounds in zip(domains, domain_bounds):
            if _domain_empty(bounds):
                continue
            eta_ibp, _, _ = minimize_J(JContext.build(net, bounds, y, k), config.ibp)
            res = optimize_target(net, bounds, rows, config, splits, eta_ibp)
            if res[0] < worst[0]:
                worst = res
        bound, state, eta = worst
        if eta is None:
            eta = simplex.initial_point(rows.shape[0], "uniform")
        result = TargetResult(k, float(bound), bool(bound >= 0.0), eta)
        if witnesses and state is not None:
            result.alpha = [a.tolist() for a in state.alpha]
            result.beta = [b.tolist() for b in state.beta]
        cert.targets.append(result)
    return cert


def unstable_neurons(bounds: LayerBounds) -> List[Tuple[int, int]]:
    out = []
    for h, (lo, hi) in enumerate(zip(bounds.pre_lower, bounds.pre_upper)):
        out.extend((h, int(j)) for j in np.flatnonzero((lo < 0) & (hi > 0)))
    return out


def single_split_domains(neuron: Tuple[int, int]) -> List[Splits]:
    return [{neuron: +1}, {neuron: -1}]


def verify_crown_single_splits(net: Network, region: InputRegion, y: int,
                               config: CrownConfig = CrownConfig(), max_unstable: int = 8) -> VerificationCertificate:
    """Unsplit bound, improved by trying every single-neuron split.

    Per target, the certified bound is the best over the unsplit domain and
    each neuron's two-branch cover. Skips splitting when more than
    ``max_unstable`` neurons are unstable.
    """
    base = verify_crown(net, region, y, config)
    neurons = unstable_neurons(propagate(net, region))
    if len(neurons) > max_unstable:
        return base
    for neuron in neurons:
        if base.overall_verified:
            break
        split = verify_crown(net, region, y, config, domains=single_split_domains(neuron))
        for t_base, t_split in zip(base.targets, split.targets):
            if t_split.bound > t_base.bound:
                t_base.bound = t_split.bound
                t_base.verified = t_split.verified
                t_base.eta = t_split.eta
    return base


def verify_crown_batch(net: Network, X, labels, eps: float, config: CrownConfig = CrownConfig(),
                       mask=None, clip=None, witnesses: bool = False) -> List[VerificationCertificate]:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return [verify_crown(net, InputRegion(x, eps, mask, clip), int(y), config, witnesses=witnesses)
            for x, y in zip(X, np.asarray(labels, dtype=int))]
