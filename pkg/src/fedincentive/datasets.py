"""Datasets: IDX parsing, synthetic Gaussian blobs, Dirichlet partitioning.

IDX layout (big-endian)::

    u32  magic        0x00000803 images / 0x00000801 labels
    u32  count
    u32  rows, cols   (images only)
    u8[] payload      row-major pixels or one byte per label
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised for a malformed IDX container (bad magic, truncated payload, bad label)."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        if self.n_classes < 1:
            raise ValueError(f"n_classes must be positive, got {self.n_classes}")
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.features):
            raise ValueError(
                f"labels length {len(self.labels)} does not match {len(self.features)} feature rows"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)

    def class_indices(self) -> list[np.ndarray]:
        """Sample indices grouped by label, each list ascending."""
        return [np.flatnonzero(self.labels == c) for c in range(self.n_classes)]


@dataclass(frozen=True)
class Partition:
    client_indices: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]


# ---------------------------------------------------------------- IDX


def _check_header(raw: bytes, magic: int, header_len: int) -> tuple[int, ...]:
    if len(raw) < 4:
        raise IdxFormatError(f"expected at least 4 header bytes, got {len(raw)}")
    (observed,) = struct.unpack(">I", raw[:4])
    if observed != magic:
        raise IdxFormatError(f"bad IDX magic 0x{observed:08x}, expected 0x{magic:08x}")
    if len(raw) < header_len:
        raise IdxFormatError(f"header needs {header_len} bytes, got {len(raw)}")
    n_dims = (header_len - 4) // 4
    return struct.unpack(f">{n_dims}I", raw[4:header_len])


def parse_idx_images(raw: bytes) -> np.ndarray:
    """Decode an IDX image file into a ``(count, rows, cols)`` uint8 array."""
    count, rows, cols = _check_header(raw, IMAGE_MAGIC, 16)
    expected = count * rows * cols
    actual = len(raw) - 16
    if actual != expected:
        raise IdxFormatError(
            f"image payload length mismatch: expected {expected} bytes, got {actual}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols).copy()


def parse_idx_labels(raw: bytes, n_classes: int = 10) -> np.ndarray:
    """Decode an IDX label file; every label byte must be below ``n_classes``."""
    (count,) = _check_header(raw, LABEL_MAGIC, 8)
    actual = len(raw) - 8
    if actual != count:
        raise IdxFormatError(f"label payload length mismatch: expected {count} bytes, got {actual}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).copy()
    bad = np.flatnonzero(labels >= n_classes)
    if len(bad):
        i = int(bad[0])
        raise IdxFormatError(f"label at index {i} has value {labels[i]} >= n_classes={n_classes}")
    return labels


def encode_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"images must be (count, rows, cols), got shape {images.shape}")
    return struct.pack(">4I", IMAGE_MAGIC, *images.shape) + images.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">2I", LABEL_MAGIC, len(labels)) + labels.tobytes()


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def load_idx(
    images_path: str | Path,
    labels_path: str | Path,
    n_classes: int = 10,
    limit: int | None = None,
) -> Dataset:
    """Load an IDX image/label pair as a flattened Dataset with pixels scaled to [0, 1].

    ``limit`` keeps only the first ``limit`` samples (file order). Gzipped files are
    read transparently.
    """
    images = parse_idx_images(_read_bytes(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path), n_classes)
    if len(images) != len(labels):
        raise IdxFormatError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), n_classes)


# ---------------------------------------------------------------- synthetic


def class_direction(c: int, n_features: int) -> np.ndarray:
    """Unit direction for class ``c``; depends only on ``(c, n_features)``, never on a run seed."""
    v = np.random.default_rng([c, n_features]).standard_normal(n_features)
    return v / np.linalg.norm(v)


def generate_synthetic(
    n_classes: int, per_class: int, n_features: int, separation: float, seed: int
) -> Dataset:
    """Gaussian blobs: class ``c`` ~ N(separation * class_direction(c), I).

    Samples are ordered by class. Class centres are shared by every seed, so
    train and test pools drawn with different seeds come from one distribution.
    """
    if n_classes < 1 or per_class < 1 or n_features < 1:
        raise ValueError("n_classes, per_class and n_features must be positive")
    if not separation > 0:
        raise ValueError(f"separation must be > 0, got {separation}")
    rng = np.random.default_rng(seed)
    centres = np.stack([separation * class_direction(c, n_features) for c in range(n_classes)])
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), per_class)
    features = centres[labels] + rng.standard_normal((len(labels), n_features))
    return Dataset(features, labels, n_classes)


# ---------------------------------------------------------------- partitioning


def largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, proportional to ``shares``.

    Floors first, then hands the leftover units to the largest fractional
    parts; ties go to the lowest position.
    """
    exact = np.asarray(shares, dtype=np.float64) * total
    counts = np.floor(exact).astype(np.int64)
    leftover = min(total - int(counts.sum()), len(counts))
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:leftover]] += 1
    return counts


def _repair_empty(clients: list[list[int]]) -> None:
    for cid in range(len(clients)):
        if clients[cid]:
            continue
        sizes = [len(c) for c in clients]
        donor = int(np.argmax(sizes))  # argmax returns the lowest id among ties
        if sizes[donor] < 2:
            raise ValueError("not enough samples to give every client at least one")
        clients[cid].append(clients[donor].pop(0))


def dirichlet_partition(
    class_indices: Sequence[Sequence[int] | np.ndarray],
    n_clients: int,
    alpha: float,
    seed: int,
) -> Partition:
    """Split each class across clients by a Dirichlet(alpha) draw.

    The generator is consumed in a fixed order: first a single
    ``dirichlet([alpha] * n_clients, size=n_classes)`` call, then one
    ``permutation`` per class (in class order) that decides which of the
    class's samples go to which client. A client left empty receives the
    lowest index of the lowest-id largest client.
    """
    if n_clients < 1:
        raise ValueError(f"n_clients must be >= 1, got {n_clients}")
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    rng = np.random.default_rng(seed)
    proportions = rng.dirichlet([alpha] * n_clients, size=len(class_indices))
    clients: list[list[int]] = [[] for _ in range(n_clients)]
    for c, idx in enumerate(class_indices):
        idx = np.asarray(idx, dtype=np.int64)
        counts = largest_remainder(proportions[c], len(idx))
        shuffled = idx[rng.permutation(len(idx))]
        start = 0
        for cid, k in enumerate(counts):
            clients[cid].extend(shuffled[start : start + k].tolist())
            start += k
    clients = [sorted(c) for c in clients]
    _repair_empty(clients)
    return Partition([np.asarray(c, dtype=np.int64) for c in clients])


def split_validation(dataset: Dataset, n: int, seed: int) -> tuple[Dataset, Dataset]:
    """Draw ``n`` samples without replacement as a validation set; return (validation, rest)."""
    if not 0 < n < len(dataset):
        raise ValueError(f"validation size must satisfy 0 < n < {len(dataset)}, got {n}")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(np.sort(perm[:n])), dataset.subset(np.sort(perm[n:]))
