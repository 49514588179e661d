"""Datasets: the 2-D four-blob toy task, MNIST IDX files, CSV, and the small fixture network."""
from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Network

DATA_DIR_ENV = "ABSTAIN_VERIFY_DATA_DIR"

TOY_CENTERS = np.array([[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]])
TOY_SIGMA = 0.6

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if self.inputs.ndim != 2:
            self.inputs = self.inputs.reshape(len(self.labels), -1)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, K)")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("non-finite feature")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


def toy_dataset(n: int, seed: int) -> Dataset:
    """``n`` points from four Gaussian blobs at (+-2, +-2), as balanced as ``n`` allows."""
    if n < 4:
        raise ValueError("need at least one point per class")
    rng = np.random.default_rng(seed)
    counts = np.full(4, n // 4)
    counts[: n % 4] += 1
    labels = np.repeat(np.arange(4), counts)
    X = TOY_CENTERS[labels] + TOY_SIGMA * rng.standard_normal((n, 2))
    order = rng.permutation(n)
    return Dataset(X[order], labels[order], 4)


# -- MNIST IDX ---------------------------------------------------------------

class IDXFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise IDXFormatError("file too short for magic number", len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IDXFormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError("truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims, dtype=np.int64))
    have = len(raw) - header
    if have != need:
        raise IDXFormatError(f"payload has {have} bytes, dimensions need {need}", header + min(have, need))
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, limit: int | None = None) -> Dataset:
    """Pixels scaled to [0, 1] and flattened; labels kept as digits 0..9."""
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    X = images.reshape(len(images), int(np.prod(images.shape[1:]))).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(int), 10)


def find_mnist(root, split: str = "test"):
    prefix = "t10k" if split == "test" else "train"
    root = Path(root)
    for suffix in ("", ".gz"):
        img = root / f"{prefix}-images-idx3-ubyte{suffix}"
        lab = root / f"{prefix}-labels-idx1-ubyte{suffix}"
        if img.exists() and lab.exists():
            return img, lab
    raise FileNotFoundError(f"no MNIST {split} IDX files under {root}")


# -- CSV ---------------------------------------------------------------------

def save_dataset_csv(ds: Dataset, path) -> None:
    d = ds.inputs.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(d)] + ["y"])
        for x, y in zip(ds.inputs, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_dataset_csv(path, num_classes: int | None = None) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    body = rows[1:] if rows[0] and rows[0][-1] == "y" else rows
    X = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64)
    y = np.array([int(r[-1]) for r in body], dtype=int)
    K = int(y.max()) + 1 if num_classes is None else num_classes
    return Dataset(X.reshape(len(y), -1), y, K)


def resolve_dataset(source: str, split: str = "test", n: int = 400, seed: int = 0,
                    limit: int | None = None) -> Dataset:
    """``toy``, ``mnist`` (IDX files under ``$ABSTAIN_VERIFY_DATA_DIR``), a CSV file, or an IDX directory.

    Toy train and test sets use different streams of the same seed.
    """
    if source == "toy":
        return toy_dataset(n, seed if split == "train" else seed + 10_007)
    if source == "mnist":
        root = os.environ.get(DATA_DIR_ENV)
        if not root:
            raise FileNotFoundError(f"set {DATA_DIR_ENV} to the directory holding the MNIST IDX files")
        return load_mnist_idx(*find_mnist(root, split), limit=limit)
    path = Path(source)
    if not path.is_absolute() and not path.exists() and os.environ.get(DATA_DIR_ENV):
        path = Path(os.environ[DATA_DIR_ENV]) / source
    if path.is_dir():
        return load_mnist_idx(*find_mnist(path, split), limit=limit)
    if path.suffix == ".csv":
        ds = load_dataset_csv(path)
        return ds if limit is None else ds.subset(slice(0, limit))
    raise FileNotFoundError(f"cannot resolve dataset {source!r}")


# -- fixture network ----------------------------------------------------------

FIXTURE_W1 = [
    [0.557, -0.296, -0.449],
    [-0.474, -0.504, 0.894],
    [-0.0208, 0.0679, 0.901],
]
FIXTURE_W2 = [
    [0.817, -0.376, 0.36],
    [0.524, 0.530, 0.0557],
    [0.0753, 0.191, 0.744],
    [-0.547, 0.660, -0.718],
]
FIXTURE_EPS = 1.0
# third input coordinate is the constant 1 carrying the bias; it is not perturbed
FIXTURE_MASK = np.array([True, True, False])


def load_fixture() -> Network:
    """Two-layer 2-D example net: 2 regular outputs followed by 2 abstain outputs."""
    return Network.from_arrays([FIXTURE_W1, FIXTURE_W2], None, num_classes=2, num_abstain=2)


def lift(X) -> np.ndarray:
    """Append the constant-1 coordinate expected by the fixture network."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.hstack([X, np.ones((len(X), 1))])
