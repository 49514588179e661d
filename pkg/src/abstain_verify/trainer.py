"""Certified training with abstain classes.

Per step the loss is

    kappa * L_nat + (1 - kappa) * (L_rob + lambda1 * (L_abs + penalty) + lambda2 * L_nat)

where ``L_rob`` is cross-entropy on IBP worst-case logits and ``L_abs`` is
the upper bound ``logsumexp([0, J_k])`` on the abstain-aware robust loss.
The simplex weights are refreshed by a few mirror-descent steps before each
weight update and held fixed while differentiating.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import simplex
from .data import Dataset
from .ibp import backward_batch, propagate_batch
from .nn import Gradient, Network, backward, forward
from .verify import J_batch, batch_rows

METRIC_COLUMNS = ["step", "eps", "kappa", "loss_total", "loss_nat", "loss_rob",
                  "loss_abstain", "penalty", "train_acc"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 0.0
    mu: float = 0.0
    gamma: Optional[float] = None  # None means 1/(K+M)
    eps_train: float = 0.1
    warmup_steps: int = 100
    rampup_steps: int = 300
    total_steps: int = 600
    kappa_end: float = 0.5
    learning_rate: float = 0.05
    lr_decay_steps: Tuple[int, ...] = ()
    optimizer: str = "sgd"
    momentum: float = 0.9
    nu: float = 0.05
    T: int = 25
    eta_init: str = "uniform"
    batch_size: int = 50
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.mu < 0:
            raise ValueError("lambda1, lambda2 and mu must be nonnegative")
        if self.gamma is not None and not (0 < self.gamma <= 1):
            raise ValueError("gamma must lie in (0, 1]")
        if not (0 <= self.warmup_steps <= self.warmup_steps + self.rampup_steps <= self.total_steps):
            raise ValueError("schedule must satisfy warmup <= warmup + rampup <= total")
        if not (0 <= self.kappa_end <= 1):
            raise ValueError("kappa_end must lie in [0, 1]")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.T < 0:
            raise ValueError("learning_rate, batch_size and T must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.lr_decay_steps = tuple(int(s) for s in self.lr_decay_steps)

    def gamma_for(self, K: int, M: int) -> float:
        return 1.0 / (K + M) if self.gamma is None else self.gamma


def schedule(step: int, config: TrainConfig) -> Tuple[float, float, float]:
    """``(eps, kappa, lr)`` at ``step``: flat during warmup, linear over the ramp, then constant."""
    if not (0 <= step <= config.total_steps):
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    if config.rampup_steps == 0:
        frac = 1.0 if step >= config.warmup_steps and step > 0 else 0.0
    else:
        frac = min(max((step - config.warmup_steps) / config.rampup_steps, 0.0), 1.0)
    eps = frac * config.eps_train
    kappa = 1.0 - frac * (1.0 - config.kappa_end)
    lr = config.learning_rate * 0.1 ** sum(step >= s for s in config.lr_decay_steps)
    return eps, kappa, lr


# -- simplex weights ----------------------------------------------------------

@dataclass
class BatchEtaState:
    """``eta[i, slot]`` is the simplex weight of sample ``i`` against its ``slot``-th target ``k != y_i``."""
    eta: np.ndarray

    @classmethod
    def create(cls, n: int, K: int, M: int, init: str = "uniform") -> "BatchEtaState":
        start = simplex.initial_point(M + 1, init)
        return cls(np.broadcast_to(start, (n, K - 1, M + 1)).copy())

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=np.float64)
        if self.eta.ndim != 3:
            raise ValueError("eta state must have shape (n, K-1, M+1)")
        simplex.check_simplex(self.eta, atol=1e-9)

    @property
    def mean(self) -> np.ndarray:
        """Average over samples and targets, length M+1."""
        return self.eta.reshape(-1, self.eta.shape[-1]).mean(axis=0)

    def subset(self, idx) -> "BatchEtaState":
        return BatchEtaState(self.eta[idx])


def degeneracy_penalty(eta_state: BatchEtaState, mu: float, gamma: float, n: int | None = None,
                       K: int | None = None, M: int | None = None) -> float:
    """``mu * || [gamma/(M+1) - mean eta]_+ ||^2``."""
    eta = eta_state.eta
    n = eta.shape[0] if n is None else n
    K = eta.shape[1] + 1 if K is None else K
    M = eta.shape[2] - 1 if M is None else M
    avg = eta.sum(axis=(0, 1)) / (n * (K - 1))
    gap = np.maximum(gamma / (M + 1) - avg, 0.0)
    return float(mu * gap @ gap)


def _penalty_grad(eta: np.ndarray, mu: float, gamma: float) -> np.ndarray:
    n, T, size = eta.shape
    avg = eta.sum(axis=(0, 1)) / (n * T)
    gap = np.maximum(gamma / size - avg, 0.0)
    return np.broadcast_to(-2.0 * mu * gap / (n * T), eta.shape)


def penultimate_box(net: Network, lo, hi):
    lowers, uppers, tape = propagate_batch(net, lo, hi)
    if net.depth == 1:
        return lo, hi, lowers, uppers, tape
    return lowers[-2], uppers[-2], lowers, uppers, tape


def refresh_eta(net: Network, X, y, eps: float, eta: np.ndarray, steps: int, nu: float,
                mu: float, gamma: float, mask=None) -> np.ndarray:
    """Mirror-descent steps on ``sum_i,k J_k(eta^{ik}) + penalty`` for the batch."""
    K, M = net.num_classes, net.num_abstain
    if M == 0 or steps == 0:
        return eta
    lo, hi = _box(X, eps, mask)
    plo, phi, *_ = penultimate_box(net, lo, hi)
    rows = batch_rows(y, K, M)
    W, b = net.layers[-1].weight, net.layers[-1].bias
    for _ in range(steps):
        _, grad, _ = J_batch(eta, rows, plo, phi, W, b)
        if mu > 0:
            grad = grad + _penalty_grad(eta, mu, gamma)
        eta = simplex.eg_step(eta, grad, nu)
    return eta


# -- losses ------------------------------------------------------------------

def _box(X, eps, mask=None):
    rad = np.full(X.shape[1], float(eps))
    if mask is not None:
        rad[~np.asarray(mask, dtype=bool)] = 0.0
    return X - rad, X + rad


def _xent(Z: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and its gradient w.r.t. ``Z``."""
    shift = Z - Z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1))
    rows = np.arange(len(y))
    loss = lse - shift[rows, y]
    p = np.exp(shift - lse[:, None])
    p[rows, y] -= 1.0
    return loss, p


def _check_batch(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=int).reshape(-1)
    if len(y) == 0:
        raise ValueError("empty batch")
    if len(X) != len(y):
        raise ValueError("inputs and labels differ in length")
    return X, y


def natural_loss(net: Network, X, y, grad: bool = False):
    X, y = _check_batch(X, y)
    loss, g = _xent(np.atleast_2d(forward(net, X)), y)
    value = float(loss.mean())
    if not grad:
        return value
    return value, backward(net, X, g / len(y))[0]


def worst_case_logits(lower: np.ndarray, upper: np.ndarray, y: np.ndarray) -> np.ndarray:
    Z = upper.copy()
    rows = np.arange(len(y))
    Z[rows, y] = lower[rows, y]
    return Z


def robust_loss_ibp(net: Network, X, y, eps: float, grad: bool = False, mask=None):
    X, y = _check_batch(X, y)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    lowers, uppers, tape = propagate_batch(net, *_box(X, eps, mask))
    loss, g = _xent(worst_case_logits(lowers[-1], uppers[-1], y), y)
    value = float(loss.mean())
    if not grad:
        return value
    g = g / len(y)
    rows = np.arange(len(y))
    g_low = np.zeros_like(g)
    g_low[rows, y] = g[rows, y]
    g_up = g.copy()
    g_up[rows, y] = 0.0
    gl: List = [None] * net.depth
    gu: List = [None] * net.depth
    gl[-1], gu[-1] = g_low, g_up
    return value, backward_batch(net, tape, gl, gu)


def abstain_loss_upper(net: Network, X, y, eps: float, eta_state: BatchEtaState, grad: bool = False,
                       mask=None):
    """Mean of ``logsumexp([0, J_k(eta^{ik}) for k != y])``."""
    X, y = _check_batch(X, y)
    eta = eta_state.eta
    K, M = net.num_classes, net.num_abstain
    if eta.shape != (len(y), K - 1, M + 1):
        raise ValueError(f"eta state shape {eta.shape} does not cover the batch")
    plo, phi, _, _, tape = penultimate_box(net, *_box(X, eps, mask))
    rows = batch_rows(y, K, M)
    W, b = net.layers[-1].weight, net.layers[-1].bias
    J, _, z = J_batch(eta, rows, plo, phi, W, b)
    aug = np.concatenate([np.zeros((len(y), 1)), J], axis=1)
    top = aug.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(aug - top).sum(axis=1))
    value = float(lse.mean())
    if not grad:
        return value
    dJ = np.exp(J - lse[:, None]) / len(y)  # (n, K-1)
    c = np.einsum("ntm,ntmj->ntj", eta, rows)
    v = c @ W  # (n, K-1, d)
    grads = Gradient.zeros_like(net)
    # J = -c.(W z + b) with z fixed at the maximizer
    grads.weights[-1] -= np.einsum("nt,ntj,ntd->jd", dJ, c, z)
    grads.biases[-1] -= np.einsum("nt,ntj->j", dJ, c)
    if net.depth > 1:
        dz = -dJ[..., None] * v
        g_lo = np.where(v >= 0, dz, 0.0).sum(axis=1)
        g_hi = np.where(v >= 0, 0.0, dz).sum(axis=1)
        gl: List = [None] * net.depth
        gu: List = [None] * net.depth
        gl[-2], gu[-2] = g_lo, g_hi
        grads = grads + backward_batch(net, tape, gl, gu)
    return value, grads


@dataclass
class LossParts:
    total: float
    nat: float
    rob: float
    abstain: float
    penalty: float


def total_loss(net: Network, X, y, eps: float, kappa: float, eta_state: BatchEtaState,
               lambda1: float, lambda2: float, mu: float, gamma: float, mask=None,
               grad: bool = False):
    """Mixed training objective; with ``grad`` also its weight gradient (eta held fixed)."""
    w_nat = kappa + (1.0 - kappa) * lambda2
    w_rob = 1.0 - kappa
    w_abs = (1.0 - kappa) * lambda1
    nat, g_nat = natural_loss(net, X, y, grad=True)
    rob, g_rob = robust_loss_ibp(net, X, y, eps, grad=True, mask=mask)
    total = w_nat * nat + w_rob * rob
    g = g_nat.scale(w_nat) + g_rob.scale(w_rob)
    ab, pen = 0.0, 0.0
    if net.num_abstain > 0 or lambda1 > 0:
        ab, g_ab = abstain_loss_upper(net, X, y, eps, eta_state, grad=True, mask=mask)
        pen = degeneracy_penalty(eta_state, mu, gamma)
        total += w_abs * (ab + pen)
        if w_abs:
            g = g + g_ab.scale(w_abs)
    parts = LossParts(float(total), nat, rob, ab, pen)
    return (parts, g) if grad else parts


# -- optimizers -----------------------------------------------------------------

class SGD:
    def __init__(self, params: List[np.ndarray], momentum: float = 0.0):
        self.momentum = momentum
        self.vel = [np.zeros_like(p) for p in params]

    def step(self, params, grads, lr):
        out = []
        for p, g, v in zip(params, grads, self.vel):
            v *= self.momentum
            v += g
            out.append(p - lr * v)
        return out


class Adam:
    def __init__(self, params: List[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1 ** self.t)
            vh = self.v[i] / (1 - self.b2 ** self.t)
            out.append(p - lr * mh / (np.sqrt(vh) + self.eps))
        return out


# -- training loop -----------------------------------------------------------

@dataclass
class MetricsLog:
    rows: List[dict] = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(float(r[k])) if k != "step" else int(r[k])) for k in METRIC_COLUMNS})
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def train(net: Network, dataset: Dataset, config: TrainConfig, mask=None) -> Tuple[Network, MetricsLog]:
    """Alternate simplex refreshes and weight steps for ``config.total_steps`` steps."""
    if dataset.num_classes != net.num_classes:
        raise ValueError(f"dataset has K={dataset.num_classes}, network K={net.num_classes}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    K, M = net.num_classes, net.num_abstain
    gamma = config.gamma_for(K, M)
    rng = np.random.default_rng(config.seed)
    eta_all = BatchEtaState.create(len(dataset), K, M, config.eta_init).eta
    weights = [l.weight.copy() for l in net.layers]
    biases = [l.bias.copy() for l in net.layers]
    params = weights + biases
    opt = Adam(params) if config.optimizer == "adam" else SGD(params, config.momentum)
    log = MetricsLog()
    batches = _batches(len(dataset), config.batch_size, rng)
    L = net.depth
    for step in range(config.total_steps):
        eps, kappa, lr = schedule(step, config)
        warm = step < config.warmup_steps
        lam1 = 0.0 if warm else config.lambda1
        lam2 = 0.0 if warm else config.lambda2
        idx = next(batches)
        X, y = dataset.inputs[idx], dataset.labels[idx]
        if lam1 > 0 and M > 0:
            eta_all[idx] = refresh_eta(net, X, y, eps, eta_all[idx], config.T, config.nu,
                                       config.mu, gamma, mask)
        state = BatchEtaState(eta_all[idx])
        parts, g = total_loss(net, X, y, eps, kappa, state, lam1, lam2, config.mu, gamma,
                              mask=mask, grad=True)
        if not math.isfinite(parts.total) or not np.all(np.isfinite(g.flat())):
            raise TrainingError(f"non-finite loss at step {step}: {parts}")
        if step % config.log_every == 0 or step == config.total_steps - 1:
            acc = float(np.mean(np.argmax(forward(net, X).reshape(len(y), -1), axis=1) == y))
            log.append(step=step, eps=eps, kappa=kappa, loss_total=parts.total, loss_nat=parts.nat,
                       loss_rob=parts.rob, loss_abstain=parts.abstain, penalty=parts.penalty,
                       train_acc=acc)
        params = opt.step(params, g.weights + g.biases, lr)
        net = net.replace(params[:L], params[L:])
    return net, log


def config_snapshot(config: TrainConfig) -> dict:
    d = asdict(config)
    d["lr_decay_steps"] = list(config.lr_decay_steps)
    return d
