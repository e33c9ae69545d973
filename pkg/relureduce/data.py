"""relureduce/data.py

Dataset ingestion: CIFAR-10/100 binary batches and seeded synthetic blobs.
"""

from __future__ import annotations

# dunders
__author__ = "Andreas Zach"
__all__ = [
    "DATASET_KINDS",
    "DatasetDescriptor",
    "Dataset",
    "parse_cifar_binary",
    "ingest_dataset",
    "resize_images",
    "augment_batch",
]

# std library
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

# 3rd party
import numpy as np
from scipy.ndimage import zoom

# own
from .errors import ConfigError, TrainingError
from .netir import TensorShape

logger = logging.getLogger(__name__)

DATASET_KINDS = ("synthetic-blobs", "cifar10-binary", "cifar100-binary")

_SYNTHETIC_TRAIN, _SYNTHETIC_TEST = 1000, 200
_CIFAR_SIDE = 32
_CIFAR_PIXELS = 3 * _CIFAR_SIDE * _CIFAR_SIDE
# label bytes per record and class count
_CIFAR_LAYOUT = {"cifar10-binary": (1, 10), "cifar100-binary": (2, 100)}
_CIFAR_FILES = {
    "cifar10-binary": ([f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
    "cifar100-binary": (["train.bin"], ["test.bin"]),
}


@dataclass(frozen=True)
class DatasetDescriptor:
    """Where the samples come from.

    Attributes:
    -> kind\t\tone of DATASET_KINDS
    -> resolution\tside length fed to the network
    -> classes\tnumber of classes (10 or 100 for the CIFAR kinds)
    -> train_size\tcap on the training samples (None keeps all)
    -> test_size\tcap on the test samples (None keeps all)
    -> path\t\tdirectory with the binary batches (CIFAR kinds only)
    -> seed\t\tgenerator seed (synthetic kind only)
    -> noise\t\tper-pixel noise std of the synthetic blobs
    """

    kind: str = "synthetic-blobs"
    resolution: int = 32
    classes: int = 10
    train_size: int | None = None
    test_size: int | None = None
    path: str = ""
    seed: int = 0
    noise: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}, expected one of {DATASET_KINDS}")
        if self.kind in _CIFAR_LAYOUT and self.classes != _CIFAR_LAYOUT[self.kind][1]:
            raise ConfigError(f"{self.kind} has {_CIFAR_LAYOUT[self.kind][1]} classes, not {self.classes}")
        if self.classes < 2 or self.resolution < 1:
            raise ConfigError(f"invalid dataset geometry: {self.classes} classes at {self.resolution}px")
        for size in (self.train_size, self.test_size):
            if size is not None and size < 0:
                raise ConfigError(f"dataset sizes must be non-negative, got {size}")

    @property
    def input_shape(self) -> TensorShape:
        return TensorShape(3, self.resolution, self.resolution)


@dataclass
class Dataset:
    """Normalized float32 images (N, C, H, W) with integer labels"""

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = ""
    _resized: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.y)

    def __repr__(self) -> str:
        return f"<Dataset({self.name}, n={len(self)}, shape={self.x.shape[1:]})>"

    @property
    def shape(self) -> TensorShape:
        return TensorShape(*self.x.shape[1:])

    def resized(self, shape: TensorShape) -> "Dataset":
        """The same samples at `shape`'s resolution (cached)"""
        if shape.spatial == self.shape.spatial:
            return self
        key = shape.spatial
        if key not in self._resized:
            self._resized[key] = Dataset(resize_images(self.x, shape.height, shape.width), self.y, self.num_classes, self.name)
        return self._resized[key]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.x[:n], self.y[:n], self.num_classes, self.name)

    def batches(self, batch_size: int, order: np.ndarray | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        idx = np.arange(len(self)) if order is None else order
        for start in range(0, len(idx), batch_size):
            sel = idx[start : start + batch_size]
            yield self.x[sel], self.y[sel]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.x, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.y, dtype="<i8").tobytes())
        return h.hexdigest()


def resize_images(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an (N, C, H, W) stack"""
    factors = (1, 1, height / x.shape[2], width / x.shape[3])
    return zoom(x, factors, order=1, grid_mode=False).astype(x.dtype, copy=False)


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop from a zero-padded image plus random horizontal flip"""
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(x)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def parse_cifar_binary(data: bytes, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse CIFAR binary records into uint8 images (N, 3, 32, 32) and labels.
    CIFAR-100 records carry a coarse and a fine label, the fine one is returned.
    """
    try:
        label_bytes, classes = _CIFAR_LAYOUT[kind]
    except KeyError:
        raise ConfigError(f"{kind!r} is not a binary CIFAR kind") from None
    record = label_bytes + _CIFAR_PIXELS
    if not data or len(data) % record:
        raise ConfigError(f"truncated {kind} file: {len(data)} bytes is not a positive multiple of {record}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    if labels.max() >= classes:
        bad = int(np.argmax(labels >= classes))
        raise ConfigError(f"label {labels[bad]} out of range [0, {classes}) in record {bad}")
    images = arr[:, label_bytes:].reshape(-1, 3, _CIFAR_SIDE, _CIFAR_SIDE)
    return images, labels


def _read_cifar(desc: DatasetDescriptor, files: list[str]) -> tuple[np.ndarray, np.ndarray]:
    root = Path(desc.path)
    parts = []
    for name in files:
        p = root / name
        if not p.is_file():
            raise ConfigError(f"missing dataset file {p}")
        parts.append(parse_cifar_binary(p.read_bytes(), desc.kind))
    return np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts])


def _synthetic_blobs(desc: DatasetDescriptor) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(desc.seed)
    res = desc.resolution
    prototypes = rng.normal(size=(desc.classes, 3, res, res))

    def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
        y = rng.permutation(np.arange(n) % desc.classes)
        x = prototypes[y] + desc.noise * rng.normal(size=(n, 3, res, res))
        return x, y.astype(np.int64)

    return draw(_SYNTHETIC_TRAIN if desc.train_size is None else desc.train_size), draw(
        _SYNTHETIC_TEST if desc.test_size is None else desc.test_size
    )


def ingest_dataset(desc: DatasetDescriptor) -> tuple[Dataset, Dataset]:
    """Load (train, test). Pixels are scaled to [0, 1] and normalized per channel
    with the training statistics.
    """
    if desc.kind == "synthetic-blobs":
        (x_tr, y_tr), (x_te, y_te) = _synthetic_blobs(desc)
    else:
        train_files, test_files = _CIFAR_FILES[desc.kind]
        x_tr, y_tr = _read_cifar(desc, train_files)
        x_te, y_te = _read_cifar(desc, test_files)
        x_tr, x_te = x_tr / 255.0, x_te / 255.0
        if desc.train_size is not None:
            x_tr, y_tr = x_tr[: desc.train_size], y_tr[: desc.train_size]
        if desc.test_size is not None:
            x_te, y_te = x_te[: desc.test_size], y_te[: desc.test_size]
    if len(y_tr) == 0:
        raise TrainingError(f"empty training set for {desc.kind}")

    mean = x_tr.mean(axis=(0, 2, 3), keepdims=True)
    std = x_tr.std(axis=(0, 2, 3), keepdims=True) + 1e-8
    train = Dataset(((x_tr - mean) / std).astype(np.float32), y_tr, desc.classes, f"{desc.kind}-train")
    test = Dataset(((x_te - mean) / std).astype(np.float32), y_te, desc.classes, f"{desc.kind}-test")

    if desc.resolution != train.shape.height:
        train = train.resized(desc.input_shape)
        test = test.resized(desc.input_shape)
    logger.info("loaded %s: %d train / %d test samples at %s", desc.kind, len(train), len(test), train.shape)
    return train, test
