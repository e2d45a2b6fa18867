"""JSON experiment configs: parsing with defaults, strict key checking, and a resolved echo.

Every field is optional. Defaults reproduce the full-scale setup (100 clients,
40 rounds, 3 local epochs, batch 32, lr 0.01, Dirichlet alpha 0.5, reward 10,
cost 2, threshold 2.5, 200 validation samples).

Example::

    {
      "data": {"kind": "idx"},                 # standard MNIST file names
      "malicious_fraction": 0.5,
      "strategy": "mechanism",
      "mechanism": {"reward": 10, "cost": 2, "threshold": 2.5}
    }
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Any, Mapping

from .engine import ExperimentConfig, IdxSource, SyntheticSource
from .mechanism import MechanismParams


class ConfigError(ValueError):
    """A config key is unknown, mistyped, or violates a constraint."""


_INT, _FLOAT, _BOOL, _STR = "integer", "number", "boolean", "string"

_TOP = {
    "n_clients": _INT,
    "rounds": _INT,
    "local_epochs": _INT,
    "batch_size": _INT,
    "learning_rate": _FLOAT,
    "alpha": _FLOAT,
    "malicious_fraction": _FLOAT,
    "flip_offset": _INT,
    "strategy": _STR,
    "validation_size": _INT,
    "hidden_layers": "list of integers",
    "krum_byzantine_count": "integer or null",
    "seed": _INT,
    "workers": _INT,
}
_MECHANISM = {"reward": _FLOAT, "cost": _FLOAT, "threshold": _FLOAT, "allow_unprofitable": _BOOL}
_SYNTHETIC = {
    "kind": _STR,
    "n_classes": _INT,
    "train_per_class": _INT,
    "test_per_class": _INT,
    "n_features": _INT,
    "separation": _FLOAT,
}
_IDX = {
    "kind": _STR,
    "train_images": _STR,
    "train_labels": _STR,
    "test_images": _STR,
    "test_labels": _STR,
    "n_classes": _INT,
    "train_limit": "integer or null",
    "test_limit": "integer or null",
}

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _coerce(key: str, value: Any, kind: str) -> Any:
    def bad() -> ConfigError:
        return ConfigError(f"{key}: expected {kind}, got {json.dumps(value, allow_nan=True)}")

    if kind.endswith("or null"):
        return None if value is None else _coerce(key, value, kind.split()[0])
    if kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad()
        return value
    if kind == _FLOAT:
        if isinstance(value, str) and value.lower() in ("inf", "+inf", "infinity"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad()
        return float(value)
    if kind == _BOOL:
        if not isinstance(value, bool):
            raise bad()
        return value
    if kind == _STR:
        if not isinstance(value, str):
            raise bad()
        return value
    if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
        raise bad()
    return tuple(value)


def _section(doc: Mapping[str, Any], schema: Mapping[str, str], prefix: str = "") -> dict[str, Any]:
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected an object")
    unknown = sorted(set(doc) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key {prefix}{unknown[0]!s}")
    return {k: _coerce(prefix + k, v, schema[k]) for k, v in doc.items()}


def _build(cls, key: str, kwargs: dict[str, Any]):
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _parse_data(doc: Mapping[str, Any] | None) -> SyntheticSource | IdxSource:
    doc = dict(doc or {})
    kind = doc.get("kind") or ("idx" if any(k in doc for k in MNIST_FILES) else "synthetic")
    if kind == "synthetic":
        fields = _section(doc, _SYNTHETIC, "data.")
        fields.pop("kind", None)
        return _build(SyntheticSource, "data", fields)
    if kind == "idx":
        fields = {**MNIST_FILES, **_section(doc, _IDX, "data.")}
        fields.pop("kind", None)
        return _build(IdxSource, "data", fields)
    raise ConfigError(f"data.kind: expected 'synthetic' or 'idx', got {kind!r}")


def config_from_dict(doc: Mapping[str, Any]) -> ExperimentConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError("config: expected a JSON object at the top level")
    doc = dict(doc)
    data = _parse_data(doc.pop("data", None))
    mech = _build(MechanismParams, "mechanism", _section(doc.pop("mechanism", None) or {}, _MECHANISM, "mechanism."))
    fields = _section(doc, _TOP)
    return _build(ExperimentConfig, "config", {"data": data, "mechanism": mech, **fields})


def parse_config(text: str) -> ExperimentConfig:
    """Parse a JSON document; missing fields take their defaults, unknown keys are errors."""
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(doc)


def config_to_dict(config: ExperimentConfig) -> dict[str, Any]:
    """Fully resolved config; ``parse_config(json.dumps(config_to_dict(c))) == c``."""
    out = dataclasses.asdict(config)
    out["hidden_layers"] = list(config.hidden_layers)
    data = out["data"]
    data = {"kind": data.pop("kind"), **data}
    out["data"] = data
    return out


def dump_config(config: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(config), indent=2, sort_keys=False)
