"""Round loop: broadcast, local training (honest or poisoned), verification, aggregation.

Every random choice draws from a generator seeded by ``derive_seed(master_seed,
stream, ...)``, so a run is a pure function of its config and does not depend
on how many worker threads train clients.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import aggregators
from .adversary import ClientProfile, ClientType, assign_types, flip_labels, malicious_count
from .aggregators import UpdateSet
from .datasets import Dataset, Partition, dirichlet_partition, generate_synthetic, load_idx, split_validation
from .mechanism import (
    Ledger,
    MechanismParams,
    VerificationOutcome,
    ledger_append,
    verify_and_pay,
)
from .model import Architecture, ModelParams, evaluate, init_params, local_train

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "krum", "mechanism")

# Stream tags for derive_seed; changing one changes every run that uses it.
_TRAIN_DATA, _TEST_DATA, _VALIDATION, _PARTITION, _TYPES, _INIT, _LOCAL = range(1, 8)


def derive_seed(master_seed: int, stream: int, *keys: int) -> int:
    """Stable 64-bit seed mixed from the master seed, a stream tag and integer keys."""
    ss = np.random.SeedSequence([master_seed, stream, *keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class SyntheticSource:
    n_classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 100
    n_features: int = 20
    separation: float = 3.0
    kind: str = field(default="synthetic", init=False)


@dataclass(frozen=True)
class IdxSource:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    n_classes: int = 10
    train_limit: int | None = None
    test_limit: int | None = None
    kind: str = field(default="idx", init=False)


@dataclass(frozen=True)
class ExperimentConfig:
    data: SyntheticSource | IdxSource = field(default_factory=SyntheticSource)
    n_clients: int = 100
    rounds: int = 40
    local_epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 0.01
    alpha: float = 0.5
    malicious_fraction: float = 0.4
    flip_offset: int = 1
    strategy: str = "mechanism"
    mechanism: MechanismParams = field(default_factory=MechanismParams)
    validation_size: int = 200
    hidden_layers: tuple[int, ...] = (64,)
    krum_byzantine_count: int | None = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        for name in ("n_clients", "rounds", "local_epochs", "batch_size", "validation_size", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.malicious_fraction <= 1.0:
            raise ValueError(f"malicious_fraction must be in [0, 1], got {self.malicious_fraction}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.flip_offset < 1:
            raise ValueError(f"flip_offset must be >= 1, got {self.flip_offset}")
        if self.krum_byzantine_count is not None and self.krum_byzantine_count < 0:
            raise ValueError("krum_byzantine_count must be >= 0")

    @property
    def byzantine_count(self) -> int:
        if self.krum_byzantine_count is not None:
            return self.krum_byzantine_count
        return malicious_count(self.n_clients, self.malicious_fraction)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    test_loss: float
    test_accuracy: float
    n_honest: int
    n_malicious: int
    outcomes: tuple[VerificationOutcome, ...] = ()
    selected_client: int | None = None
    n_verified: int = 0
    n_verified_honest: int = 0
    n_verified_malicious: int = 0
    mean_honest_utility: float | None = None
    mean_malicious_utility: float | None = None
    round_expenditure: float = 0.0
    server_expenditure: float = 0.0


class Setup(NamedTuple):
    architecture: Architecture
    train: Dataset
    validation: Dataset
    test: Dataset
    partition: Partition
    types: list[ClientType]
    clients: list[ClientProfile]
    initial: ModelParams


class RunResult(NamedTuple):
    records: list[RoundRecord]
    ledger: Ledger
    final: ModelParams
    setup: Setup


def load_pools(config: ExperimentConfig, base_dir: str | Path | None = None) -> tuple[Dataset, Dataset]:
    """Train and test pools for the configured source; relative IDX paths resolve against ``base_dir``."""
    src = config.data
    if isinstance(src, SyntheticSource):
        train = generate_synthetic(
            src.n_classes, src.train_per_class, src.n_features, src.separation,
            derive_seed(config.seed, _TRAIN_DATA),
        )
        test = generate_synthetic(
            src.n_classes, src.test_per_class, src.n_features, src.separation,
            derive_seed(config.seed, _TEST_DATA),
        )
        return train, test
    root = Path(base_dir) if base_dir is not None else Path(".")
    paths = [root / p for p in (src.train_images, src.train_labels, src.test_images, src.test_labels)]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"dataset files not found: {', '.join(missing)}")
    train = load_idx(paths[0], paths[1], src.n_classes, src.train_limit)
    test = load_idx(paths[2], paths[3], src.n_classes, src.test_limit)
    return train, test


def prepare(config: ExperimentConfig, base_dir: str | Path | None = None) -> Setup:
    train, test_pool = load_pools(config, base_dir)
    validation, test = split_validation(test_pool, config.validation_size, derive_seed(config.seed, _VALIDATION))
    partition = dirichlet_partition(
        train.class_indices(), config.n_clients, config.alpha, derive_seed(config.seed, _PARTITION)
    )
    types = assign_types(config.n_clients, config.malicious_fraction, derive_seed(config.seed, _TYPES))
    clients = []
    for cid, (shard, kind) in enumerate(zip(partition.client_indices, types)):
        data = train.subset(shard)
        if kind is ClientType.MALICIOUS:
            data = flip_labels(data, config.flip_offset)
        clients.append(ClientProfile(cid, kind, shard, config.mechanism.cost, data))
    arch = Architecture((train.n_features, *config.hidden_layers, train.n_classes))
    initial = init_params(arch, derive_seed(config.seed, _INIT))
    return Setup(arch, train, validation, test, partition, types, clients, initial)


def client_updates(
    global_params: ModelParams,
    clients: Sequence[ClientProfile],
    config: ExperimentConfig,
    round_index: int,
) -> UpdateSet:
    """Every client trains from the broadcast model on its own (possibly flipped) shard."""

    def train_one(client: ClientProfile) -> ModelParams:
        if client.data is None:
            raise ValueError(f"client {client.id} has no training data attached")
        seed = derive_seed(config.seed, _LOCAL, client.id, round_index)
        return local_train(
            global_params, client.data, config.local_epochs, config.batch_size, config.learning_rate, seed
        )

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            updates = list(pool.map(train_one, clients))
    else:
        updates = [train_one(c) for c in clients]
    return UpdateSet(updates, [c.id for c in clients])


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def run_round(
    global_params: ModelParams,
    clients: Sequence[ClientProfile],
    config: ExperimentConfig,
    round_index: int,
    *,
    validation: Dataset,
    test: Dataset,
    prior_expenditure: float = 0.0,
) -> tuple[ModelParams, RoundRecord]:
    if not clients:
        raise ValueError("a round needs at least one client")
    updates = client_updates(global_params, clients, config, round_index)
    n_mal = sum(c.malicious for c in clients)
    extra: dict = {}

    if config.strategy == "fedavg":
        next_global = aggregators.fedavg(updates)
    elif config.strategy == "krum":
        next_global, scores = aggregators.krum(updates, config.byzantine_count)
        extra["selected_client"] = updates.client_ids[aggregators.krum_winner(scores, updates.client_ids)]
    else:
        params = config.mechanism
        outcomes = tuple(
            verify_and_pay(u, validation, params, cid) for cid, u in zip(updates.client_ids, updates.updates)
        )
        passed = [i for i, o in enumerate(outcomes) if o.verified]
        verified = UpdateSet([updates.updates[i] for i in passed], [updates.client_ids[i] for i in passed])
        next_global = aggregators.mean_of_verified(verified, global_params)
        if not passed:
            log.info("round %d: no update verified, keeping the global model", round_index)
        malicious = {c.id: c.malicious for c in clients}
        spent = sum(o.payment for o in outcomes)
        extra.update(
            outcomes=outcomes,
            n_verified=len(passed),
            n_verified_honest=sum(o.verified and not malicious[o.client_id] for o in outcomes),
            n_verified_malicious=sum(o.verified and malicious[o.client_id] for o in outcomes),
            mean_honest_utility=_mean([o.payment - params.cost for o in outcomes if not malicious[o.client_id]]),
            mean_malicious_utility=_mean([o.payment - params.cost for o in outcomes if malicious[o.client_id]]),
            round_expenditure=spent,
            server_expenditure=prior_expenditure + spent,
        )

    ev = evaluate(next_global, test)
    record = RoundRecord(
        round=round_index,
        test_loss=ev.mean_loss,
        test_accuracy=ev.accuracy,
        n_honest=len(clients) - n_mal,
        n_malicious=n_mal,
        **extra,
    )
    return next_global, record


def run_experiment(config: ExperimentConfig, base_dir: str | Path | None = None, setup: Setup | None = None) -> RunResult:
    """Run every round of ``config``; data files are loaded (and checked) before round 0."""
    setup = setup or prepare(config, base_dir)
    params = setup.initial
    ledger = Ledger(reward=config.mechanism.reward)
    records: list[RoundRecord] = []
    for t in range(config.rounds):
        params, record = run_round(
            params, setup.clients, config, t,
            validation=setup.validation, test=setup.test,
            prior_expenditure=ledger.server_expenditure,
        )
        if config.strategy == "mechanism":
            ledger = ledger_append(ledger, record.outcomes, setup.types, config.mechanism.cost)
        records.append(record)
        log.debug("round %d: acc=%.4f verified=%d", t, record.test_accuracy, record.n_verified)
    return RunResult(records, ledger, params, setup)


@dataclass(frozen=True)
class Comparison:
    rows: list[tuple[str, float, float]]
    degradation: dict[str, float]

    def accuracy(self, strategy: str, f: float) -> float:
        return next(acc for s, ff, acc in self.rows if s == strategy and ff == f)


def compare_strategies(
    base_config: ExperimentConfig,
    strategies: Sequence[str],
    f_values: Sequence[float],
    base_dir: str | Path | None = None,
) -> Comparison:
    """Final accuracy per (strategy, f) and each strategy's drop from the lowest to the highest f.

    All cells share the base config's seed, so every strategy at a given f
    faces the same partition, the same malicious clients and the same shuffles.
    """
    if not strategies or not f_values:
        raise ValueError("compare_strategies needs at least one strategy and one fraction")
    rows = []
    for f in f_values:
        for s in strategies:
            cfg = replace(base_config, strategy=s, malicious_fraction=f)
            result = run_experiment(cfg, base_dir)
            rows.append((s, f, result.records[-1].test_accuracy))
            log.info("compare: %s f=%.2f acc=%.4f", s, f, rows[-1][2])
    lo, hi = min(f_values), max(f_values)
    table = Comparison(rows, {})
    for s in strategies:
        table.degradation[s] = table.accuracy(s, lo) - table.accuracy(s, hi)
    return table

