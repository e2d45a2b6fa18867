"""Aggregation rules: uniform FedAvg, Krum, and the mean of verified updates.

Means are taken in ascending client-id order so the result does not depend on
the order updates arrive in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import ModelParams


@dataclass(frozen=True)
class UpdateSet:
    updates: Sequence[ModelParams] = field(default_factory=list)
    client_ids: Sequence[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.updates) != len(self.client_ids):
            raise ValueError(
                f"{len(self.updates)} updates but {len(self.client_ids)} client ids"
            )
        if len(set(self.client_ids)) != len(self.client_ids):
            raise ValueError("client ids in an UpdateSet must be unique")
        if self.updates:
            arch = self.updates[0].architecture
            for cid, u in zip(self.client_ids, self.updates):
                if u.architecture != arch:
                    raise ValueError(f"update from client {cid} has architecture {u.architecture}")

    def __len__(self) -> int:
        return len(self.updates)

    def ordered(self) -> list[tuple[int, ModelParams]]:
        return sorted(zip(self.client_ids, self.updates), key=lambda p: p[0])


def _uniform_mean(updates: UpdateSet) -> ModelParams:
    pairs = updates.ordered()
    stack = np.stack([u.values for _, u in pairs])
    return ModelParams(stack.mean(axis=0), pairs[0][1].architecture)


def fedavg(updates: UpdateSet) -> ModelParams:
    if len(updates) == 0:
        raise ValueError("fedavg needs at least one update")
    return _uniform_mean(updates)


def krum_scores(vectors: np.ndarray, byzantine_count: int) -> np.ndarray:
    """Sum of squared distances from each row to its ``n - byzantine_count - 2`` nearest other rows."""
    n = len(vectors)
    m = n - byzantine_count - 2
    if byzantine_count < 0 or m < 1:
        raise ValueError(
            f"krum with byzantine_count={byzantine_count} needs at least "
            f"{max(byzantine_count, 0) + 3} updates, got {n}"
        )
    sq = np.empty((n, n))
    for i in range(n):
        diff = vectors - vectors[i]
        sq[i] = np.einsum("ij,ij->i", diff, diff)
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(sq[i], i))
        scores[i] = others[:m].sum()
    return scores


def krum(updates: UpdateSet, byzantine_count: int) -> tuple[ModelParams, np.ndarray]:
    """Select the update with the lowest Krum score.

    Returns the selected update and the score of every update, in the order the
    updates were given. Ties go to the lowest client id.
    """
    vectors = np.stack([u.values for u in updates.updates]) if len(updates) else np.empty((0, 0))
    scores = krum_scores(vectors, byzantine_count)
    return updates.updates[krum_winner(scores, updates.client_ids)], scores


def krum_winner(scores: np.ndarray, client_ids: Sequence[int]) -> int:
    """Position of the minimal score, lowest client id among ties."""
    best = scores.min()
    tied = [i for i, s in enumerate(scores) if s == best]
    return min(tied, key=lambda i: client_ids[i])


def mean_of_verified(verified: UpdateSet, fallback: ModelParams) -> ModelParams:
    """Unweighted mean of the verified updates, or ``fallback`` itself when none passed."""
    if len(verified) == 0:
        return fallback
    if verified.updates[0].architecture != fallback.architecture:
        raise ValueError("verified updates and fallback model have different architectures")
    return _uniform_mean(verified)
