"""Dense ReLU networks with K regular and M abstain output classes.

Class indices are 0-based: ``0..K-1`` are regular classes and
``K..K+M-1`` are the abstain classes ``a_1..a_M``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Raised when array dimensions do not compose."""


@dataclass(frozen=True)
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got shape {w.shape}")
        if w.shape[0] != b.shape[0]:
            raise ShapeError(f"weight rows {w.shape[0]} != bias length {b.shape[0]}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class Network:
    """Feedforward net: ReLU after every layer except the last."""

    layers: Tuple[DenseLayer, ...]
    num_classes: int
    num_abstain: int = 0

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("network needs at least one layer")
        if self.num_classes < 1 or self.num_abstain < 0:
            raise ValueError("need K >= 1 and M >= 0")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise ShapeError(
                    f"layer {i} expects {layers[i].in_dim} inputs, "
                    f"previous layer gives {layers[i - 1].out_dim}"
                )
        if layers[-1].out_dim != self.num_classes + self.num_abstain:
            raise ShapeError(
                f"final layer has {layers[-1].out_dim} outputs, expected K+M="
                f"{self.num_classes + self.num_abstain}"
            )
        object.__setattr__(self, "layers", layers)

    @classmethod
    def from_arrays(cls, weights: Sequence, biases: Sequence | None = None,
                    num_classes: int | None = None, num_abstain: int = 0) -> "Network":
        if biases is None:
            biases = [np.zeros(np.shape(w)[0]) for w in weights]
        layers = tuple(DenseLayer(w, b) for w, b in zip(weights, biases))
        if num_classes is None:
            num_classes = layers[-1].out_dim - num_abstain
        return cls(layers, num_classes, num_abstain)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def abstain_indices(self) -> np.ndarray:
        return np.arange(self.num_classes, self.num_classes + self.num_abstain)

    def replace(self, weights=None, biases=None) -> "Network":
        weights = [l.weight for l in self.layers] if weights is None else weights
        biases = [l.bias for l in self.layers] if biases is None else biases
        return Network.from_arrays(weights, biases, self.num_classes, self.num_abstain)


@dataclass
class Gradient:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def zeros_like(cls, net: Network) -> "Gradient":
        return cls([np.zeros_like(l.weight) for l in net.layers],
                   [np.zeros_like(l.bias) for l in net.layers])

    def __add__(self, other: "Gradient") -> "Gradient":
        return Gradient([a + b for a, b in zip(self.weights, other.weights)],
                        [a + b for a, b in zip(self.biases, other.biases)])

    def scale(self, c: float) -> "Gradient":
        return Gradient([c * w for w in self.weights], [c * b for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.input_dim:
        raise ShapeError(f"input has dim {x.shape[-1]}, network expects {net.input_dim}")
    return x


def activations(net: Network, x) -> List[np.ndarray]:
    """Per-layer outputs ``[z_1, ..., z_L]`` (post-ReLU for hidden layers).

    Works on a single vector or a batch of row vectors.
    """
    z = _check_input(net, x)
    out = []
    last = net.depth - 1
    for i, layer in enumerate(net.layers):
        z = z @ layer.weight.T + layer.bias
        if i < last:
            z = np.maximum(z, 0.0)
        out.append(z)
    return out


def forward(net: Network, x) -> np.ndarray:
    return activations(net, x)[-1]


def predict(net: Network, x) -> np.ndarray | int:
    # np.argmax returns the first maximal index, which is the tie rule we want
    logits = forward(net, x)
    if logits.ndim == 1:
        return int(np.argmax(logits))
    return np.argmax(logits, axis=1)


def is_abstain(net: Network, label: int) -> bool:
    return net.num_classes <= label < net.output_dim


def backward(net: Network, x, upstream) -> Tuple[Gradient, np.ndarray]:
    """Reverse-mode gradient of ``upstream . z_L(x)``.

    ``x`` may be a batch (n, d) with ``upstream`` of shape (n, K+M); the
    parameter gradients are then summed over the batch. ReLU'(0) is 0.
    """
    x = _check_input(net, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape[-1] != net.output_dim:
        raise ShapeError(f"upstream has dim {upstream.shape[-1]}, expected {net.output_dim}")
    single = x.ndim == 1
    X = np.atleast_2d(x)
    G = np.atleast_2d(upstream)
    if G.shape[0] != X.shape[0]:
        raise ShapeError("batch sizes of x and upstream differ")

    inputs = [X]
    pre = []
    z = X
    for i, layer in enumerate(net.layers):
        h = z @ layer.weight.T + layer.bias
        pre.append(h)
        z = np.maximum(h, 0.0) if i < net.depth - 1 else h
        inputs.append(z)

    gw = [None] * net.depth
    gb = [None] * net.depth
    g = G
    for i in reversed(range(net.depth)):
        if i < net.depth - 1:
            g = g * (pre[i] > 0)
        gw[i] = g.T @ inputs[i]
        gb[i] = g.sum(axis=0)
        g = g @ net.layers[i].weight
    input_grad = g[0] if single else g
    return Gradient(gw, gb), input_grad


# -- weight file format -----------------------------------------------------

def network_to_dict(net: Network) -> dict:
    return {
        "layers": [{"weight": l.weight.tolist(), "bias": l.bias.tolist()} for l in net.layers],
        "K": net.num_classes,
        "M": net.num_abstain,
    }


def network_from_dict(data: dict) -> Network:
    try:
        layers = data["layers"]
        K = int(data["K"])
        M = int(data["M"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed weight file: {exc}") from exc
    weights, biases = [], []
    for i, layer in enumerate(layers):
        w = np.array(layer["weight"], dtype=np.float64)
        if w.ndim != 2:
            raise ShapeError(f"layer {i}: weight is not a matrix")
        weights.append(w)
        biases.append(np.array(layer["bias"], dtype=np.float64))
    return Network.from_arrays(weights, biases, K, M)


def save_network(net: Network, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(network_to_dict(net)), encoding="utf-8")


def load_network(path) -> Network:
    return network_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def random_network(dims: Sequence[int], num_classes: int, num_abstain: int = 0,
                   rng: np.random.Generator | None = None, scale: float = 1.0) -> Network:
    """He-style random init; ``dims`` lists every layer width including input and output."""
    rng = np.random.default_rng() if rng is None else rng
    if dims[-1] != num_classes + num_abstain:
        raise ShapeError("last width must equal K+M")
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, scale * np.sqrt(2.0 / d_in), size=(d_out, d_in)))
        biases.append(rng.normal(0.0, 0.1 * scale, size=d_out))
    return Network.from_arrays(weights, biases, num_classes, num_abstain)


def _max_level(K: int, m: int):
    """One ReLU layer halving ``m`` abstain values by pairwise max; regular values pass through.

    Returns ``(P, Q, m_next)`` with ``next = Q @ relu(P @ u)``.
    """
    P_rows, Q_cols = [], []
    n_in = K + m

    def unit(coefs):
        row = np.zeros(n_in)
        for j, c in coefs:
            row[j] += c
        P_rows.append(row)
        return len(P_rows) - 1

    outputs = []  # per output: list of (hidden unit, coefficient)
    for j in range(K):
        outputs.append([(unit([(j, 1.0)]), 1.0), (unit([(j, -1.0)]), -1.0)])
    for i in range(0, m, 2):
        a = K + i
        if i + 1 < m:
            b = a + 1
            # max(a, b) = b + relu(a - b)
            outputs.append([(unit([(b, 1.0)]), 1.0), (unit([(b, -1.0)]), -1.0),
                            (unit([(a, 1.0), (b, -1.0)]), 1.0)])
        else:
            outputs.append([(unit([(a, 1.0)]), 1.0), (unit([(a, -1.0)]), -1.0)])
    P = np.array(P_rows)
    Q = np.zeros((len(outputs), len(P_rows)))
    for r, terms in enumerate(outputs):
        for h, c in terms:
            Q[r, h] = c
    return P, Q, len(outputs) - K


def merge_abstains(net: Network) -> Network:
    """Equivalent single-abstain net whose abstain logit is the max of the original abstain logits.

    Regular logits are unchanged. Adds ``max(1, ceil(log2 M))`` ReLU layers.
    """
    K, M = net.num_classes, net.num_abstain
    if M < 1:
        raise ValueError("network has no abstain classes to merge")
    weights = [l.weight for l in net.layers[:-1]]
    biases = [l.bias for l in net.layers[:-1]]
    W, b = net.layers[-1].weight, net.layers[-1].bias
    m = M
    while True:
        P, Q, m = _max_level(K, m)
        weights.append(P @ W)
        biases.append(P @ b)
        W, b = Q, np.zeros(Q.shape[0])
        if m == 1:
            break
    weights.append(W)
    biases.append(b)
    return Network.from_arrays(weights, biases, K, 1)
