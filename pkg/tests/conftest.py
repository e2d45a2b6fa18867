from __future__ import annotations

import os
from pathlib import Path

import pytest

from fedincentive.engine import ExperimentConfig, SyntheticSource

# Desk-scale task: 20 clients on separable 10-class blobs, ~300 samples per client.
DESK_DATA = SyntheticSource(
    n_classes=10, train_per_class=1000, test_per_class=100, n_features=20, separation=6.0
)


def desk_config(**overrides) -> ExperimentConfig:
    base = dict(
        data=DESK_DATA,
        n_clients=20,
        rounds=12,
        learning_rate=0.3,
        hidden_layers=(32,),
        seed=0,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def tiny_config(**overrides) -> ExperimentConfig:
    """A few-hundred-sample run for fast engine tests."""
    base = dict(
        data=SyntheticSource(n_classes=4, train_per_class=60, test_per_class=30, n_features=6, separation=5.0),
        n_clients=6,
        rounds=3,
        local_epochs=1,
        batch_size=16,
        learning_rate=0.1,
        hidden_layers=(8,),
        validation_size=40,
        seed=3,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def mnist_dir() -> Path | None:
    d = os.environ.get("FEDINCENTIVE_DATA_DIR")
    if d and (Path(d) / "train-images-idx3-ubyte").exists():
        return Path(d)
    return None


requires_mnist = pytest.mark.skipif(
    mnist_dir() is None,
    reason="official MNIST IDX files not found (set FEDINCENTIVE_DATA_DIR)",
)


# Acceptance criteria report: test_acceptance records (number -> (title, passed, detail)).
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
