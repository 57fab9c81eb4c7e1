"""Datasets: IDX files, synthetic blobs, attack-target selection and PGM dumps."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import InsufficientDataError, ShapeError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class LabeledDataset:
    samples: np.ndarray  # (n, d) float64 in [0, 1]
    labels: np.ndarray
    split_tag: str = "train"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or len(self.samples) != len(self.labels):
            raise ShapeError("samples must be (n, d) with one label per row")
        if self.split_tag not in ("train", "test"):
            raise ValueError("split_tag must be 'train' or 'test'")
        if self.samples.size and (self.samples.min() < 0 or self.samples.max() > 1):
            raise ValueError("sample values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.samples[idx], self.labels[idx], self.split_tag)


def _read_idx(path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise ValueError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise ValueError(f"{path}: expected {count} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split_tag: str = "test") -> LabeledDataset:
    images = _read_idx(images_path, IMAGES_MAGIC)
    labels = _read_idx(labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    samples = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return LabeledDataset(samples, labels.astype(np.int64), split_tag)


def write_idx(images: np.ndarray, labels, images_path, labels_path) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 3 or len(images) != len(labels):
        raise ShapeError("images must be (n, rows, cols) with one label each")
    for path, magic, arr in ((images_path, IMAGES_MAGIC, images), (labels_path, LABELS_MAGIC, labels)):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        header = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
        Path(path).write_bytes(header + arr.astype(np.uint8).tobytes())


def synthetic_blobs(n: int, num_classes: int, dim: int, spread: float, seed: int = 0,
                    split_tag: str = "train") -> LabeledDataset:
    """Gaussian clusters around seeded centres in the unit cube, clamped to [0, 1]."""
    if n < num_classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(num_classes, dim))
    labels = rng.permutation(np.arange(n) % num_classes)
    samples = centers[labels] + spread * rng.standard_normal((n, dim))
    return LabeledDataset(np.clip(samples, 0.0, 1.0), labels, split_tag)


def select_attack_indices(net, data: LabeledDataset, n: int, seed: int = 0) -> np.ndarray:
    """Seeded sample, without replacement, of correctly classified indices (sorted)."""
    correct = np.flatnonzero(nn.predict(net, data.samples) == data.labels)
    if n > len(correct):
        raise InsufficientDataError(f"asked for {n} targets but only {len(correct)} samples are classified correctly")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(correct, size=n, replace=False))


def select_attack_targets(net, data: LabeledDataset, n: int, seed: int = 0) -> list:
    idx = select_attack_indices(net, data, n, seed)
    return [(data.samples[i], int(data.labels[i])) for i in idx]


def dump_image(x, width: int, height: int, path) -> None:
    """8-bit binary PGM with round-half-up quantisation."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if width * height != x.size:
        raise ShapeError(f"{width}x{height} image needs {width * height} values, got {x.size}")
    pixels = np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())


def export_mnist_subset(out_dir, n_test: int = 1000, seed: int = 0) -> dict:
    """Write the 5,000-image MNIST subset bundled with mlxtend as IDX train/test files."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise RuntimeError("the MNIST subset needs mlxtend (pip install 'lidsub[mnist]')") from exc
    x, y = mnist_data()
    order = np.random.default_rng(seed).permutation(len(y))
    images = np.rint(x[order]).astype(np.uint8).reshape(-1, 28, 28)
    y = y[order]
    out = Path(out_dir)
    paths = {key: out / name for key, name in MNIST_FILES.items()}
    write_idx(images[n_test:], y[n_test:], paths["train_images"], paths["train_labels"])
    write_idx(images[:n_test], y[:n_test], paths["test_images"], paths["test_labels"])
    return paths
