"""Toy-task sweeps: number of abstain classes, regularization, and the merged deeper equivalent."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .data import Dataset, toy_dataset
from .nn import Network, merge_abstains, predict, random_network
from .oracle import abstain_utilization
from .trainer import TrainConfig, train
from .verify import SimplexSettings, verify_ibp_batch

SWEEP_COLUMNS = ["M", "regularized", "variant", "seed", "std_acc", "robust_acc", "idle_abstains",
                 "verified"]


@dataclass(frozen=True)
class ExperimentConfig:
    n_train: int = 400
    n_test: int = 1000
    hidden: Tuple[int, ...] = (16,)
    eps_train: float = 0.1
    eps_eval: float | None = None  # defaults to eps_train
    total_steps: int = 600
    warmup_steps: int = 100
    rampup_steps: int = 300
    lambda1: float = 1.0
    lambda2: float = 0.0
    mu: float = 1000.0
    gamma: float | None = None
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    batch_size: int = 50
    # radii, as multiples of the training radius, swept when counting abstain detections
    sweep_multipliers: Tuple[float, ...] = (1.0, 2.0, 5.0, 10.0)
    attack_steps: int = 20
    verifier: SimplexSettings = field(default_factory=SimplexSettings)

    @property
    def eval_eps(self) -> float:
        return self.eps_train if self.eps_eval is None else self.eps_eval

    def train_config(self, K: int, M: int, seed: int, regularized: bool) -> TrainConfig:
        return TrainConfig(lambda1=self.lambda1, lambda2=self.lambda2,
                           mu=self.mu if regularized else 0.0, gamma=self.gamma,
                           eps_train=self.eps_train, warmup_steps=self.warmup_steps,
                           rampup_steps=self.rampup_steps, total_steps=self.total_steps,
                           learning_rate=self.learning_rate, optimizer=self.optimizer,
                           batch_size=self.batch_size, seed=seed)


def toy_split(cfg: ExperimentConfig, seed: int) -> Tuple[Dataset, Dataset]:
    return toy_dataset(cfg.n_train, seed), toy_dataset(cfg.n_test, seed + 10_007)


def train_toy(M: int, seed: int, regularized: bool, cfg: ExperimentConfig,
              train_set: Dataset | None = None) -> Network:
    if train_set is None:
        train_set = toy_split(cfg, seed)[0]
    K = train_set.num_classes
    dims = [train_set.inputs.shape[1], *cfg.hidden, K + M]
    net = random_network(dims, K, M, np.random.default_rng(seed))
    net, _ = train(net, train_set, cfg.train_config(K, M, seed, regularized))
    return net


def evaluate(net: Network, test: Dataset, cfg: ExperimentConfig, seed: int) -> Dict:
    certs = verify_ibp_batch(net, test.inputs, test.labels, cfg.eval_eps, cfg.verifier)
    verified = np.array([c.overall_verified for c in certs])
    std = float(np.mean(np.asarray(predict(net, test.inputs)) == test.labels))
    eps_values = [m * cfg.eps_train for m in cfg.sweep_multipliers]
    util = abstain_utilization(net, test.inputs, test.labels, eps_values, steps=cfg.attack_steps,
                               rng=np.random.default_rng(seed))
    return {
        "std_acc": std,
        "robust_acc": float(verified.mean()),
        "verified": int(verified.sum()),
        "idle_abstains": int(np.sum(util == 0)),
        "utilization": util.tolist(),
    }


def run_row(M: int, regularized: bool, seed: int, cfg: ExperimentConfig,
            variant: str = "multi") -> Dict:
    """Train one configuration and evaluate it. ``variant='merged'`` verifies the deeper single-abstain equivalent."""
    train_set, test = toy_split(cfg, seed)
    net = train_toy(M, seed, regularized, cfg, train_set)
    if variant == "merged":
        net = merge_abstains(net)
    elif variant != "multi":
        raise ValueError(f"unknown variant {variant!r}")
    row = {"M": M, "regularized": int(regularized), "variant": variant, "seed": seed}
    row.update(evaluate(net, test, cfg, seed))
    return row


def depth_pair(M: int, seed: int, cfg: ExperimentConfig, regularized: bool = False) -> Tuple[Dict, Dict]:
    """Same trained net verified as is and through its merged (L+1)-layer single-abstain form."""
    train_set, test = toy_split(cfg, seed)
    net = train_toy(M, seed, regularized, cfg, train_set)
    base = {"M": M, "regularized": int(regularized), "seed": seed}
    multi = dict(base, variant="multi", **evaluate(net, test, cfg, seed))
    merged = dict(base, variant="merged", **evaluate(merge_abstains(net), test, cfg, seed))
    return multi, merged


def sweep(Ms: Sequence[int], regularized: Sequence[bool], seeds: Sequence[int], cfg: ExperimentConfig,
          depth: bool = False) -> List[Dict]:
    rows = []
    for reg in regularized:
        for M in Ms:
            for seed in seeds:
                if depth and M > 0:
                    rows.extend(depth_pair(M, seed, cfg, reg))
                else:
                    rows.append(run_row(M, reg, seed, cfg))
    return rows


def summarize(rows: List[Dict]) -> List[Dict]:
    """Seed-averaged accuracies per (M, regularized, variant)."""
    groups: Dict[tuple, List[Dict]] = {}
    for r in rows:
        groups.setdefault((r["M"], r["regularized"], r["variant"]), []).append(r)
    out = []
    for (M, reg, variant), rs in sorted(groups.items()):
        out.append({"M": M, "regularized": reg, "variant": variant, "seeds": len(rs),
                    "std_acc": float(np.mean([r["std_acc"] for r in rs])),
                    "robust_acc": float(np.mean([r["robust_acc"] for r in rs])),
                    "idle_abstains": float(np.mean([r["idle_abstains"] for r in rs]))})
    return out


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
