"""Client types and the label-flipping attack."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .datasets import Dataset


class ClientType(str, enum.Enum):
    BENEVOLENT = "benevolent"
    MALICIOUS = "malicious"


@dataclass(frozen=True)
class ClientProfile:
    """A simulated client. ``data`` is the shard view it trains on (already flipped if malicious)."""

    id: int
    type: ClientType
    shard: np.ndarray
    cost: float
    data: Dataset | None = None

    def __post_init__(self) -> None:
        if len(self.shard) == 0:
            raise ValueError(f"client {self.id} has an empty shard")
        if self.cost < 0:
            raise ValueError(f"client {self.id} has negative cost {self.cost}")

    @property
    def malicious(self) -> bool:
        return self.type is ClientType.MALICIOUS


def malicious_count(n_clients: int, f: float) -> int:
    """round(f * n) with halves rounded up (Python's round() would round half to even)."""
    return int(math.floor(f * n_clients + 0.5))


def assign_types(n_clients: int, f: float, seed: int) -> list[ClientType]:
    """Exactly ``malicious_count(n, f)`` malicious clients at seeded positions.

    The shuffle does not depend on ``f``, so for a fixed seed the malicious set
    at a lower fraction is a subset of the set at a higher one.
    """
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"malicious fraction must be in [0, 1], got {f}")
    order = np.random.default_rng(seed).permutation(n_clients)
    types = [ClientType.BENEVOLENT] * n_clients
    for i in order[: malicious_count(n_clients, f)]:
        types[int(i)] = ClientType.MALICIOUS
    return types


def flip_labels(data: Dataset, k: int) -> Dataset:
    """Relabel every sample ``y -> (y + k) mod n_classes``; features are shared, not copied."""
    if not 1 <= k < data.n_classes:
        raise ValueError(f"flip offset must satisfy 1 <= k < {data.n_classes}, got {k}")
    return Dataset(data.features, (data.labels + k) % data.n_classes, data.n_classes)
