"""MNIST (IDX) loading, attack-set sampling and synthetic datasets."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .init import STREAM_ATTACK, STREAM_DATA, philox

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(Exception):
    """Malformed or inconsistent dataset files."""


@dataclass(frozen=True)
class Batch:
    x: np.ndarray
    y: np.ndarray
    indices: np.ndarray = None

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    name: str = ""
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        for split in ("train", "test"):
            x, y = getattr(self, f"{split}_x"), getattr(self, f"{split}_y")
            if len(x) != len(y):
                raise DataError(f"{split}: {len(x)} inputs but {len(y)} labels")
            if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
                raise DataError(f"{split}: label outside [0, {self.num_classes})")


def _open(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse a big-endian unsigned-byte IDX file (gzip accepted)."""
    path = Path(path)
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise DataError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", data[:4])
    if expected_magic is not None and magic != expected_magic:
        raise DataError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08 or not 1 <= (magic & 0xFF) <= 4:
        raise DataError(f"{path}: bad magic 0x{magic:08x} (expected unsigned-byte IDX)")
    ndim = magic & 0xFF
    if len(data) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated dimension table")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    need = int(np.prod(dims))
    payload = data[4 + 4 * ndim:]
    if len(payload) != need:
        raise DataError(f"{path}: payload has {len(payload)} bytes, dims {dims} need {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    head = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(head + array.tobytes())


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images as float64 ``(N, 1, rows, cols)`` scaled to [0, 1]; labels as int64."""
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.ndim != 3 or labels.ndim != 1:
        raise DataError("images must be 3-D and labels 1-D")
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise DataError("normalized pixels outside [0, 1]")
    return x, labels.astype(np.int64)


def _find(data_dir: Path, name: str) -> Path:
    for cand in (name, name + ".gz", name.replace("-idx", ".idx")):
        p = data_dir / cand
        if p.exists():
            return p
    raise DataError(f"missing {name}[.gz] in {data_dir}")


def load_mnist(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    tx, ty = load_idx(*(_find(data_dir, n) for n in MNIST_FILES["train"]))
    vx, vy = load_idx(*(_find(data_dir, n) for n in MNIST_FILES["test"]))
    if ty.max() >= 10 or vy.max() >= 10:
        raise DataError("MNIST labels must be < 10")
    return Dataset(tx, ty, vx, vy, 10, "mnist", {"scheme": "divide-255", "range": [0.0, 1.0]})


def sample_attack_set(x: np.ndarray, y: np.ndarray, size: int, seed: int) -> Batch:
    """``size`` distinct training samples, chosen deterministically from ``seed``."""
    n = len(y)
    if not 1 <= size <= n:
        raise ValueError(f"attack set size {size} not in [1, {n}]")
    idx = philox(STREAM_ATTACK, seed).permutation(n)[:size]
    return Batch(x[idx], y[idx], idx)


def synthetic_gaussians(n: int, dims, num_classes: int, seed: int, *, separation: float = 10.0,
                        test_fraction: float = 0.25) -> Dataset:
    """Isotropic unit-variance Gaussian clusters with means ``separation`` apart.

    Class means sit on scaled coordinate axes, so any two means are
    ``separation`` sigma apart. Labels are balanced to within one sample per
    split. Inputs are affinely mapped into [0, 1] using the train min/max.
    """
    if n < num_classes:
        raise ValueError("need at least one sample per class")
    shape = (dims,) if np.isscalar(dims) else tuple(dims)
    d = int(np.prod(shape))
    rng = philox(STREAM_DATA, seed)
    means = np.zeros((num_classes, d))
    for c in range(num_classes):
        means[c, c % d] = separation / np.sqrt(2.0) * (1 + c // d)
    n_test = int(round(n * test_fraction))
    n_train = n - n_test

    def draw(m):
        y = np.arange(m) % num_classes
        y = y[rng.permutation(m)]
        return means[y] + rng.normal(size=(m, d)), y

    tx, ty = draw(n_train)
    vx, vy = draw(n_test)
    lo, hi = tx.min(), tx.max()
    scale = hi - lo if hi > lo else 1.0
    tx = np.clip((tx - lo) / scale, 0.0, 1.0)
    vx = np.clip((vx - lo) / scale, 0.0, 1.0)
    return Dataset(tx.reshape(n_train, *shape), ty, vx.reshape(n_test, *shape), vy, num_classes,
                   f"gauss-{num_classes}c-{d}d-s{seed}",
                   {"scheme": "minmax-train", "lo": float(lo), "hi": float(hi)})
