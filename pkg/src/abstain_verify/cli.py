"""Command-line entry point: train, verify, attack-audit, compare, demo, export."""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .crown import CrownConfig, verify_crown_batch
from .data import Dataset, resolve_dataset, save_dataset_csv
from .experiments import SWEEP_COLUMNS, ExperimentConfig, summarize, sweep
from .ibp import InputRegion
from .nn import Network, load_network, predict, random_network, save_network
from .oracle import abstain_utilization, exact_check, laplace_table, pgd_attack
from .trainer import TrainConfig, TrainingError, config_snapshot, train
from .verify import SimplexSettings, verify_ibp_batch

EXIT_OK, EXIT_NONE_VERIFIED, EXIT_USAGE = 0, 1, 2
SGD_LR, ADAM_LR = 0.05, 5e-4


class UsageError(Exception):
    pass


# -- manifests and atomic output ----------------------------------------------

def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: Optional[int]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    weights_hash: Optional[str] = None
    started: str = ""
    finished: str = ""
    version: str = __version__

    def write(self, path) -> None:
        _atomic_write(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise UsageError(f"output directory {path.parent} does not exist")
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _manifest_path(out) -> Path:
    return Path(str(out) + ".manifest.json")


# -- shared argument helpers --------------------------------------------------

def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _load_data(args, split: str) -> Dataset:
    n = args.n_train if split == "train" else args.n_test
    return resolve_dataset(args.data, split=split, n=n, seed=args.seed, limit=getattr(args, "limit", None))


def _check_km(args, K: int, M: int) -> None:
    if args.K is not None and args.K != K:
        raise UsageError(f"--K {args.K} does not match {K}")
    if args.M is not None and args.M != M:
        raise UsageError(f"--M {args.M} does not match {M}")


def _learning_rate(args) -> float:
    if args.lr is not None:
        return args.lr
    return ADAM_LR if args.optimizer == "adam" else SGD_LR


def _settings(args) -> SimplexSettings:
    return SimplexSettings(nu=args.nu, iters=args.iters, init=args.init, early_exit=not args.no_early_exit)


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    started = _now()
    ds = _load_data(args, "train")
    K = ds.num_classes
    if args.K is not None and args.K != K:
        raise UsageError(f"--K {args.K} but dataset has {K} classes")
    M = K if args.M is None else args.M
    cfg = TrainConfig(lambda1=args.lambda1, lambda2=args.lambda2, mu=args.mu, gamma=args.gamma,
                      eps_train=args.eps_train, warmup_steps=args.warmup, rampup_steps=args.rampup,
                      total_steps=args.steps, kappa_end=args.kappa_end, learning_rate=_learning_rate(args),
                      lr_decay_steps=tuple(args.lr_decay), optimizer=args.optimizer,
                      nu=args.nu_train, T=args.eta_steps, batch_size=args.batch_size, seed=args.seed)
    dims = [ds.inputs.shape[1], *args.hidden, K + M]
    net = random_network(dims, K, M, np.random.default_rng(args.seed))
    net, log = train(net, ds, cfg)
    save_network(net, args.out)
    if args.metrics:
        _atomic_write(args.metrics, log.to_csv())
    outputs = {"weights": str(args.out)}
    if args.metrics:
        outputs["metrics"] = str(args.metrics)
    RunManifest("train", dict(config_snapshot(cfg), hidden=list(args.hidden), M=M, K=K, data=args.data),
                args.seed, {"data": args.data}, outputs,
                git_blob_hash(Path(args.out).read_bytes()), started, _now()).write(_manifest_path(args.out))
    last = log.rows[-1]
    print(f"trained {net.depth}-layer net K={K} M={M}: loss {last['loss_total']:.4f}, "
          f"batch accuracy {last['train_acc']:.3f}")
    return EXIT_OK


# -- verify -------------------------------------------------------------------

def _verify_chunk(task):
    net, X, y, eps, method, settings, witnesses, offset = task
    if method == "ibp":
        certs = verify_ibp_batch(net, X, y, eps, settings)
    else:
        certs = verify_crown_batch(net, X, y, eps, CrownConfig(ibp=settings), witnesses=witnesses)
    return [c.to_record(offset + i, witnesses) for i, c in enumerate(certs)]


def run_verification(net: Network, ds: Dataset, eps: float, method: str, settings: SimplexSettings,
                     witnesses: bool = False, workers: int = 1, chunk: int = 64) -> List[dict]:
    tasks = [(net, ds.inputs[s:s + chunk], ds.labels[s:s + chunk], eps, method, settings, witnesses, s)
             for s in range(0, len(ds), chunk)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_verify_chunk, tasks))
    else:
        parts = [_verify_chunk(t) for t in tasks]
    records = [r for part in parts for r in part]
    records.sort(key=lambda r: r["index"])
    return records


def summarize_records(records: List[dict]) -> dict:
    n = len(records)
    correct = sum(r["predicted"] == r["y"] for r in records)
    verified = sum(r["overall_verified"] for r in records)
    return {"n": n, "standard_accuracy": correct / n if n else 0.0,
            "robust_verified_accuracy": verified / n if n else 0.0, "verified": verified}


def cmd_verify(args) -> int:
    started = _now()
    if args.eps < 0:
        raise UsageError("--eps must be nonnegative")
    net = load_network(args.weights)
    _check_km(args, net.num_classes, net.num_abstain)
    ds = _load_data(args, "test")
    if ds.num_classes != net.num_classes:
        raise UsageError(f"dataset has {ds.num_classes} classes, network {net.num_classes}")
    records = run_verification(net, ds, args.eps, args.method, _settings(args), args.witnesses,
                               args.workers)
    summary = summarize_records(records)
    util = abstain_utilization(net, ds.inputs, ds.labels, [args.eps], steps=args.attack_steps,
                               rng=np.random.default_rng(args.seed)) if args.eps > 0 else \
        np.zeros(net.num_abstain, dtype=int)
    summary["abstain_utilization"] = util.tolist()
    body = "".join(json.dumps(r) + "\n" for r in records)
    if args.out:
        _atomic_write(args.out, body)
        RunManifest("verify", {"method": args.method, "eps": args.eps, **asdict(_settings(args))}, args.seed,
                    {"weights": str(args.weights), "data": args.data}, {"report": str(args.out)},
                    git_blob_hash(Path(args.weights).read_bytes()), started, _now()).write(_manifest_path(args.out))
    else:
        sys.stdout.write(body)
    # keep stdout pure JSONL when the report goes there
    log = sys.stdout if args.out else sys.stderr
    print(f"samples: {summary['n']}", file=log)
    print(f"standard accuracy: {summary['standard_accuracy']:.4f}", file=log)
    print(f"robust verified accuracy ({args.method}, eps={args.eps:g}): "
          f"{summary['robust_verified_accuracy']:.4f}", file=log)
    if net.num_abstain:
        print("abstain utilization (adversarial examples per abstain class):", file=log)
        total = max(int(util.sum()), 1)
        for m, c in enumerate(util):
            print(f"  a{m + 1}: {int(c):6d} {'#' * int(round(40 * c / total))}", file=log)
    if args.fail_if_none and summary["verified"] == 0:
        return EXIT_NONE_VERIFIED
    return EXIT_OK


# -- attack audit ---------------------------------------------------------------

def cmd_attack_audit(args) -> int:
    net = load_network(args.weights)
    ds = _load_data(args, "test")
    rng = np.random.default_rng(args.seed)
    certs = verify_ibp_batch(net, ds.inputs, ds.labels, args.eps, _settings(args))
    lines, attacked, conflicts = [], 0, 0
    for i, (x, y, cert) in enumerate(zip(ds.inputs, ds.labels, certs)):
        region = InputRegion(x, args.eps)
        res = pgd_attack(net, region, int(y), args.steps, args.restarts, rng)
        rec = {"index": i, "y": int(y), "verified": cert.overall_verified, "attack_found": res.found}
        if res.found:
            attacked += 1
            rec["x_adv"] = [float(v) for v in res.x_adv]
            rec["target"] = res.target
        if args.grid and net.input_dim <= 3:
            rec["grid_ok"] = exact_check(net, region, int(y), pgd_steps=args.steps,
                                         pgd_restarts=args.restarts, rng=rng)
        if res.found and cert.overall_verified:
            conflicts += 1
        lines.append(json.dumps(rec) + "\n")
    if args.out:
        _atomic_write(args.out, "".join(lines))
    n = len(ds)
    print(f"samples: {n}  verified: {sum(c.overall_verified for c in certs)}  attacked: {attacked}  "
          f"verified-but-attacked: {conflicts}")
    return EXIT_NONE_VERIFIED if conflicts else EXIT_OK


# -- compare ------------------------------------------------------------------

def cmd_compare(args) -> int:
    started = _now()
    regs = {"no": [False], "yes": [True], "both": [False, True]}[args.regularized]
    cfg = ExperimentConfig(n_train=args.n_train, n_test=args.n_test, hidden=tuple(args.hidden),
                           eps_train=args.eps_train, eps_eval=args.eps, total_steps=args.steps,
                           warmup_steps=args.warmup, rampup_steps=args.rampup, lambda1=args.lambda1,
                           lambda2=args.lambda2, mu=args.mu, gamma=args.gamma, learning_rate=_learning_rate(args),
                           optimizer=args.optimizer, batch_size=args.batch_size)
    rows = sweep(args.M_list, regs, args.seeds, cfg, depth=args.depth)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    if args.out:
        _atomic_write(args.out, buf.getvalue())
        cfg_dict = asdict(cfg)
        cfg_dict["verifier"] = asdict(cfg.verifier)
        RunManifest("compare", dict(cfg_dict, M=args.M_list, regularized=args.regularized, depth=args.depth),
                    None, {"data": "toy"}, {"sweep": str(args.out)}, None, started,
                    _now()).write(_manifest_path(args.out))
    else:
        sys.stdout.write(buf.getvalue())
    for s in summarize(rows):
        print(f"M={s['M']:<3d} reg={s['regularized']} {s['variant']:<6s} std={s['std_acc']:.4f} "
              f"robust={s['robust_acc']:.4f} idle={s['idle_abstains']:.1f}", file=sys.stderr)
    return EXIT_OK


# -- demo / export ------------------------------------------------------------

def cmd_demo(args) -> int:
    print(f"{'model':<22s} {'threshold':<14s} {'error':>8s}")
    for model, th, err in laplace_table(args.t, (args.t1, args.t2)):
        print(f"{model:<22s} {th:<14s} {err:8.4f}")
    return EXIT_OK


def cmd_export(args) -> int:
    ds = _load_data(args, args.split)
    buf_path = Path(args.out)
    if not buf_path.parent.exists():
        raise UsageError(f"output directory {buf_path.parent} does not exist")
    save_dataset_csv(ds, args.out)
    print(f"wrote {len(ds)} rows to {args.out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def _add_data(p, n_default: int = 400):
    p.add_argument("--data", default="toy", help="toy, mnist, a CSV file or an IDX directory")
    p.add_argument("--n-train", type=int, default=n_default, help="toy training set size")
    p.add_argument("--n-test", type=int, default=1000, help="toy test set size")
    p.add_argument("--limit", type=int, default=None, help="truncate file-backed datasets")
    p.add_argument("--seed", type=int, default=0)


def _add_simplex(p):
    p.add_argument("--nu", type=float, default=SimplexSettings.nu, help="mirror-descent step")
    p.add_argument("--iters", type=int, default=SimplexSettings.iters)
    p.add_argument("--init", choices=["interior", "vertex", "uniform"], default="interior")
    p.add_argument("--no-early-exit", action="store_true")


def _add_training(p):
    p.add_argument("--hidden", type=_int_list, default=[16], help="hidden widths, e.g. 32,32")
    p.add_argument("--eps-train", type=float, default=0.1)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=0.0)
    p.add_argument("--mu", type=float, default=1000.0)
    p.add_argument("--gamma", type=float, default=None, help="defaults to 1/(K+M)")
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--rampup", type=int, default=300)
    p.add_argument("--lr", type=float, default=None, help="default 0.05 for sgd, 5e-4 for adam")
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    p.add_argument("--batch-size", type=int, default=50)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abstain-verify",
                                     description="Certified robustness with multiple abstain classes")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="certified training on a dataset")
    _add_data(p)
    _add_training(p)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--M", type=int, default=None, help="abstain classes (default K)")
    p.add_argument("--kappa-end", type=float, default=0.5)
    p.add_argument("--lr-decay", type=_int_list, default=[], help="steps at which lr drops 10x")
    p.add_argument("--nu-train", type=float, default=0.05, help="mirror-descent step for eta during training")
    p.add_argument("--eta-steps", type=int, default=25)
    p.add_argument("--out", required=True, help="weights JSON")
    p.add_argument("--metrics", default=None, help="metrics CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="certify a test set")
    _add_data(p)
    _add_simplex(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--method", choices=["ibp", "crown"], default="ibp")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--M", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--witnesses", action="store_true", help="include eta/alpha/beta in the report")
    p.add_argument("--attack-steps", type=int, default=20)
    p.add_argument("--fail-if-none", action="store_true", help="exit 1 when nothing is verified")
    p.add_argument("--out", default=None, help="JSONL report (stdout if omitted)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("attack-audit", help="PGD against certificates")
    _add_data(p)
    _add_simplex(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--grid", action="store_true", help="also run the grid check (input dim <= 3)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_attack_audit)

    p = sub.add_parser("compare", help="M sweep and depth comparison on the toy task")
    _add_training(p)
    p.add_argument("--n-train", type=int, default=400)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--M-list", type=_int_list, default=[0, 2, 4])
    p.add_argument("--regularized", choices=["no", "yes", "both"], default="both")
    p.add_argument("--depth", action="store_true", help="also verify the merged single-abstain net")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--eps", type=float, default=None, help="verification radius (default eps-train)")
    p.add_argument("--out", default=None, help="sweep CSV (stdout if omitted)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("demo", help="1-D Laplace example table")
    p.add_argument("--t", type=float, default=5.0)
    p.add_argument("--t1", type=float, default=-5.0)
    p.add_argument("--t2", type=float, default=5.0)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("export", help="write a dataset as CSV (x..., y)")
    _add_data(p)
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, IsADirectoryError, PermissionError, ValueError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
