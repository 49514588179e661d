"""Interval bound propagation over an l-infinity ball."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .nn import Gradient, Network, ShapeError, activations

# (layer index among hidden layers, neuron index) -> +1 (active, z >= 0) or -1 (inactive, z < 0)
Splits = Dict[Tuple[int, int], int]


@dataclass(frozen=True)
class InputRegion:
    """The box ``{x : |x - center|_inf <= eps}`` restricted to ``mask`` coordinates.

    Coordinates where ``mask`` is False are held fixed (radius 0), which is how
    a lifted constant bias input is kept unattackable. ``clip`` optionally
    intersects the box with ``[clip[0], clip[1]]``.
    """

    center: np.ndarray
    eps: float
    mask: Optional[np.ndarray] = None
    clip: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(c)):
            raise ValueError("region center must be finite")
        if self.eps < 0:
            raise ValueError(f"eps must be nonnegative, got {self.eps}")
        object.__setattr__(self, "center", c)
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool).reshape(-1)
            if m.shape != c.shape:
                raise ShapeError("mask and center differ in length")
            object.__setattr__(self, "mask", m)

    @property
    def radius(self) -> np.ndarray:
        r = np.full_like(self.center, float(self.eps))
        if self.mask is not None:
            r[~self.mask] = 0.0
        return r

    @property
    def lower(self) -> np.ndarray:
        lo = self.center - self.radius
        if self.clip is not None:
            lo = np.clip(lo, *self.clip)
        return lo

    @property
    def upper(self) -> np.ndarray:
        hi = self.center + self.radius
        if self.clip is not None:
            hi = np.clip(hi, *self.clip)
        return hi

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.lower, self.upper
        return lo + (hi - lo) * rng.random((n, lo.size))

    def with_eps(self, eps: float) -> "InputRegion":
        return InputRegion(self.center, eps, self.mask, self.clip)


@dataclass
class LayerBounds:
    """Elementwise bounds per layer.

    ``lower[i]``/``upper[i]`` bound the output of layer ``i+1`` (post-ReLU for
    hidden layers, affine logits for the last). ``pre_lower``/``pre_upper``
    hold pre-activation bounds for the hidden layers only.
    """

    input_lower: np.ndarray
    input_upper: np.ndarray
    lower: List[np.ndarray]
    upper: List[np.ndarray]
    pre_lower: List[np.ndarray] = field(default_factory=list)
    pre_upper: List[np.ndarray] = field(default_factory=list)

    @property
    def logits(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.lower[-1], self.upper[-1]

    @property
    def penultimate(self) -> Tuple[np.ndarray, np.ndarray]:
        """Box on ``z_{L-1}``; the input box when the network has one layer."""
        if len(self.lower) == 1:
            return self.input_lower, self.input_upper
        return self.lower[-2], self.upper[-2]

    def unstable(self, layer: int) -> np.ndarray:
        return (self.pre_lower[layer] < 0) & (self.pre_upper[layer] > 0)


def affine_interval(weight, bias, lo, hi):
    mid = (hi + lo) / 2.0
    rad = (hi - lo) / 2.0
    center = mid @ weight.T + bias
    dev = rad @ np.abs(weight).T
    return center - dev, center + dev


def propagate(net: Network, region: InputRegion, splits: Splits | None = None) -> LayerBounds:
    """IBP bounds for every layer; ReLU is applied to hidden layers only.

    ``splits`` clamps pre-activation intervals of chosen hidden neurons to one
    side of zero (a branch-and-bound subdomain) before continuing.
    """
    if region.center.shape[0] != net.input_dim:
        raise ShapeError(f"region has dim {region.center.shape[0]}, network expects {net.input_dim}")
    lo, hi = region.lower, region.upper
    bounds = LayerBounds(lo, hi, [], [])
    last = net.depth - 1
    for i, layer in enumerate(net.layers):
        lo, hi = affine_interval(layer.weight, layer.bias, lo, hi)
        if i < last:
            if splits:
                lo, hi = lo.copy(), hi.copy()
                for (li, j), sign in splits.items():
                    if li != i:
                        continue
                    if sign > 0:
                        lo[j] = max(lo[j], 0.0)
                    else:
                        hi[j] = min(hi[j], 0.0)
            bounds.pre_lower.append(lo)
            bounds.pre_upper.append(hi)
            lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
        bounds.lower.append(lo)
        bounds.upper.append(hi)
    return bounds


def contains(bounds: LayerBounds, net: Network, x, tol: float = 1e-9) -> bool:
    """True iff every layer's activation at ``x`` lies within the bounds."""
    for z, lo, hi in zip(activations(net, x), bounds.lower, bounds.upper):
        if np.any(z < lo - tol) or np.any(z > hi + tol):
            return False
    return True


# -- batched, differentiable IBP used by the trainer ----------------------

def propagate_batch(net: Network, lo: np.ndarray, hi: np.ndarray):
    """Batched IBP on rows of ``lo``/``hi``; returns per-layer bounds and a tape for ``backward_batch``."""
    tape = []
    lowers, uppers = [], []
    last = net.depth - 1
    for i, layer in enumerate(net.layers):
        mid = (hi + lo) / 2.0
        rad = (hi - lo) / 2.0
        center = mid @ layer.weight.T + layer.bias
        dev = rad @ np.abs(layer.weight).T
        pl, pu = center - dev, center + dev
        tape.append((mid, rad, pl, pu))
        if i < last:
            lo, hi = np.maximum(pl, 0.0), np.maximum(pu, 0.0)
        else:
            lo, hi = pl, pu
        lowers.append(lo)
        uppers.append(hi)
    return lowers, uppers, tape


def backward_batch(net: Network, tape, g_lower: List[np.ndarray], g_upper: List[np.ndarray]) -> Gradient:
    """Reverse pass through ``propagate_batch``.

    ``g_lower[i]``/``g_upper[i]`` are loss gradients w.r.t. the layer-i
    outputs (``None`` for no direct dependence). The input box is treated as
    a constant.
    """
    grad = Gradient.zeros_like(net)
    last = net.depth - 1
    gl = gu = None
    for i in reversed(range(net.depth)):
        layer = net.layers[i]
        mid, rad, pl, pu = tape[i]
        dl = g_lower[i] if g_lower[i] is not None else 0.0
        du = g_upper[i] if g_upper[i] is not None else 0.0
        if gl is not None:
            dl = dl + gl
            du = du + gu
        if np.isscalar(dl) and np.isscalar(du):
            gl = np.zeros_like(mid)
            gu = np.zeros_like(mid)
            continue
        dl = np.broadcast_to(dl, pl.shape)
        du = np.broadcast_to(du, pu.shape)
        if i < last:
            dl = dl * (pl > 0)
            du = du * (pu > 0)
        g_center = dl + du
        g_dev = du - dl
        grad.weights[i] += g_center.T @ mid + (g_dev.T @ rad) * np.sign(layer.weight)
        grad.biases[i] += g_center.sum(axis=0)
        g_mid = g_center @ layer.weight
        g_rad = g_dev @ np.abs(layer.weight)
        gl = (g_mid - g_rad) / 2.0
        gu = (g_mid + g_rad) / 2.0
    return grad
