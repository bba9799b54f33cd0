"""Multinomial logistic regression, dataset loaders and non-IID partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (m, input_dim), scaled to [0, 1]
    labels: np.ndarray  # (m,), int
    num_classes: int = 10

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise DataError("features and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> Dataset:
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class DatasetShard:
    data: Dataset
    owner: int

    def __len__(self) -> int:
        return len(self.data)


# --------------------------------------------------------------------------
# loaders


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError(f"{path}: truncated header at byte 0")
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at byte 0, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{path}: truncated dimension header at byte {len(buf)}")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    expected = header + int(np.prod(dims))
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, file ends at byte {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an MNIST-style IDX image/label pair; pixels are scaled by 1/255."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(feats, labels.astype(np.int64), num_classes=10)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (m, rows, cols) and labels (m,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def load_bundled_digits() -> Dataset:
    """The 8x8 digits set shipped with the package (1797 x 64, pixels 0..16)."""
    text = resources.files("fedperm").joinpath("data/digits.csv").read_text()
    rows = np.loadtxt(text.splitlines(), delimiter=",", dtype=np.int64)
    return Dataset(rows[:, 1:].astype(np.float64) / 16.0, rows[:, 0], num_classes=10)


def train_test_split(data: Dataset, test_fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    perm = rng.permutation(len(data))
    n_test = int(round(test_fraction * len(data)))
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))


def dirichlet_partition(
    data: Dataset,
    num_clients: int,
    alpha: float,
    rng: np.random.Generator,
    min_size: int = 1,
    max_tries: int = 1000,
) -> list[DatasetShard]:
    """Split each class across clients with Dirichlet(alpha) proportions.

    Draws are repeated until every shard holds at least ``min_size``
    examples.
    """
    if len(data) == 0:
        raise DataError("cannot partition an empty dataset")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if num_clients < 1:
        raise ValueError("need at least one client")
    for _ in range(max_tries):
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for c in range(data.num_classes):
            idx = np.flatnonzero(data.labels == c)
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(num_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
            for u, part in enumerate(np.split(idx, cuts)):
                buckets[u].append(part)
        shards = [np.sort(np.concatenate(b)) for b in buckets]
        if min(s.size for s in shards) >= min_size:
            return [DatasetShard(data.subset(s), u) for u, s in enumerate(shards)]
    raise DataError(f"could not give every client {min_size} examples in {max_tries} draws")


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class LogRegModel:
    weights: np.ndarray  # (input_dim, num_classes)
    bias: np.ndarray  # (num_classes,)

    @classmethod
    def zeros(cls, input_dim: int, num_classes: int) -> LogRegModel:
        return cls(np.zeros((input_dim, num_classes)), np.zeros(num_classes))

    @classmethod
    def random(cls, input_dim: int, num_classes: int, rng: np.random.Generator, scale: float = 0.01) -> LogRegModel:
        return cls(rng.normal(0, scale, (input_dim, num_classes)), np.zeros(num_classes))

    @property
    def input_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @property
    def d(self) -> int:
        return self.input_dim * self.num_classes + self.num_classes

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    def unflatten(self, v) -> LogRegModel:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.d,):
            raise ValueError(f"expected {self.d} parameters, got shape {v.shape}")
        cut = self.input_dim * self.num_classes
        return LogRegModel(v[:cut].reshape(self.weights.shape).copy(), v[cut:].copy())

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss(model: LogRegModel, x: np.ndarray, y: np.ndarray) -> float:
    """Mean softmax cross-entropy."""
    z = model.logits(x)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def gradient(model: LogRegModel, x: np.ndarray, y: np.ndarray) -> LogRegModel:
    """Gradient of :func:`loss`, returned in model shape."""
    p = _softmax(model.logits(x))
    p[np.arange(len(y)), y] -= 1.0
    p /= len(y)
    return LogRegModel(x.T @ p, p.sum(axis=0))


def local_sgd(
    model: LogRegModel,
    shard: Dataset | DatasetShard,
    lr: float,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    project: Callable[[LogRegModel], LogRegModel] | None = None,
) -> LogRegModel:
    """Mini-batch SGD for ``epochs`` passes; ``project`` runs after every step."""
    data = shard.data if isinstance(shard, DatasetShard) else shard
    if len(data) == 0:
        raise DataError("empty shard")
    w, b = model.weights.copy(), model.bias.copy()
    current = LogRegModel(w, b)
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            g = gradient(current, data.features[idx], data.labels[idx])
            current = LogRegModel(current.weights - lr * g.weights, current.bias - lr * g.bias)
            if project is not None:
                current = project(current)
    return current


def evaluate(model: LogRegModel, test: Dataset) -> float:
    if len(test) == 0:
        return 0.0
    return float(np.mean(model.predict(test.features) == test.labels))
