"""Dataset construction: synthetic blobs, IDX and CSV loaders, splits.

Datasets are immutable value objects; iteration order and all randomness
are fully determined by explicit seeds.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset",
    "BatchIterator",
    "IdxError",
    "IdxMagicError",
    "IdxTruncatedError",
    "IdxCountMismatchError",
    "make_synthetic_blobs",
    "load_idx",
    "save_idx",
    "load_csv",
    "split",
    "standardize",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for malformed IDX files."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # [num_samples, feature_dim] float64
    labels: np.ndarray  # [num_samples] int64
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must be one index per sample")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def make_synthetic_blobs(
    num_classes: int,
    samples_per_class: int,
    feature_dim: int,
    spread: float,
    seed: int,
) -> Dataset:
    """Gaussian clusters around distinct means on a radius-2 hypersphere.

    Exactly ``samples_per_class`` samples per class, class-major order, so
    labels are balanced by construction.  Deterministic in ``seed``.
    """
    if num_classes < 1 or samples_per_class < 1 or feature_dim < 1:
        raise ValueError("counts must be positive")
    if spread <= 0:
        raise ValueError(f"spread must be positive, got {spread}")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, feature_dim))
    means = 2.0 * means / np.linalg.norm(means, axis=1, keepdims=True)
    features = np.empty((num_classes * samples_per_class, feature_dim))
    labels = np.empty(num_classes * samples_per_class, dtype=np.int64)
    for c in range(num_classes):
        start = c * samples_per_class
        features[start : start + samples_per_class] = means[c] + spread * rng.standard_normal(
            (samples_per_class, feature_dim)
        )
        labels[start : start + samples_per_class] = c
    return Dataset(features, labels, num_classes)


def _read_exact(f, n: int, path) -> bytes:
    chunk = f.read(n)
    if len(chunk) != n:
        raise IdxTruncatedError(f"{path}: expected {n} more bytes, got {len(chunk)}")
    return chunk


def load_idx(images_path, labels_path) -> Dataset:
    """Load big-endian IDX image/label files; pixels scale to [0, 1]."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IMAGES_MAGIC:
            raise IdxMagicError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"
            )
        pixels = np.frombuffer(
            _read_exact(f, count * rows * cols, images_path), dtype=np.uint8
        )
    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != LABELS_MAGIC:
            raise IdxMagicError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"
            )
        labels = np.frombuffer(_read_exact(f, label_count, labels_path), dtype=np.uint8)
    if count != label_count:
        raise IdxCountMismatchError(
            f"image count {count} does not match label count {label_count}"
        )
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    num_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(features, labels, num_classes)


def save_idx(dataset: Dataset, images_path, labels_path, rows: int, cols: int) -> None:
    """Write a dataset whose features are [0, 1] pixel rows as IDX files."""
    n = len(dataset)
    if rows * cols != dataset.feature_dim:
        raise ValueError(f"rows*cols={rows * cols} does not match feature_dim={dataset.feature_dim}")
    pixels = np.clip(np.rint(dataset.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def load_csv(path) -> Dataset:
    """Comma-separated floats, final column the integer label.

    A header row is detected by a non-numeric first token and skipped.
    """
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        for i, row in enumerate(reader):
            if not row:
                continue
            if i == 0 and not _is_number(row[0]):
                continue
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    features = np.array([[float(v) for v in row[:-1]] for row in rows])
    labels = np.array([int(row[-1]) for row in rows], dtype=np.int64)
    if np.any(labels < 0):
        raise ValueError(f"{path}: negative labels")
    return Dataset(features, labels, int(labels.max()) + 1)


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint, exhaustive train/test split, deterministic in ``seed``.

    Stratified per class when every class has at least 2 samples; a plain
    shuffled split otherwise.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    present = counts[counts > 0]
    if present.size and present.min() >= 2:
        test_idx = []
        for c in range(dataset.num_classes):
            members = np.flatnonzero(dataset.labels == c)
            if members.size == 0:
                continue
            k = int(round(members.size * test_fraction))
            k = min(max(k, 1), members.size - 1)
            test_idx.append(rng.permutation(members)[:k])
        test_idx = np.sort(np.concatenate(test_idx))
    else:
        k = int(round(n * test_fraction))
        if k < 1 or k >= n:
            raise ValueError(f"split of {n} samples at fraction {test_fraction} is degenerate")
        test_idx = np.sort(rng.permutation(n)[:k])
    mask = np.zeros(n, dtype=bool)
    mask[test_idx] = True
    if mask.all() or not mask.any():
        raise ValueError(f"split of {n} samples at fraction {test_fraction} is degenerate")
    train = Dataset(dataset.features[~mask], dataset.labels[~mask], dataset.num_classes)
    test = Dataset(dataset.features[mask], dataset.labels[mask], dataset.num_classes)
    return train, test


def standardize(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset]:
    """Zero-mean, unit-variance per feature, statistics from the train split."""
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return (
        Dataset((train.features - mean) / std, train.labels, train.num_classes),
        Dataset((test.features - mean) / std, test.labels, test.num_classes),
    )


class BatchIterator:
    """Deterministic shuffled batches; every sample appears once per epoch.

    The shuffle for epoch ``e`` is seeded by ``(seed, e)``, so the full
    batch sequence is reproducible across runs.  The final short batch is
    always yielded.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed, shuffle: bool = True):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
        self.shuffle = shuffle

    def steps_per_epoch(self) -> int:
        n = len(self.dataset)
        return (n + self.batch_size - 1) // self.batch_size

    def batches(self, epoch: int):
        n = len(self.dataset)
        if self.shuffle:
            order = np.random.default_rng((*self.seed, epoch)).permutation(n)
        else:
            order = np.arange(n)
        for start in range(0, n, self.batch_size):
            idx = order[start : start + self.batch_size]
            yield self.dataset.features[idx], self.dataset.labels[idx]
