"""Multilayer perceptron on a flat parameter vector, trained with plain mini-batch SGD.

Parameter layout, layer by layer: the weight matrix ``W_k`` of shape
``(fan_in, fan_out)`` flattened row-major, followed by the bias ``b_k``.
Hidden layers apply ReLU; the output layer is affine (logits).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .datasets import Dataset


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("an architecture needs at least input and output sizes")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive, got {self.layer_sizes}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}; only 'relu' is implemented")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))

    def layer_slices(self) -> list[tuple[slice, slice]]:
        """(weight slice, bias slice) into the flat vector, per layer."""
        out, pos = [], 0
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(pos, pos + a * b)
            pos += a * b
            out.append((w, slice(pos, pos + b)))
            pos += b
        return out


@dataclass(frozen=True)
class ModelParams:
    """Flat float64 parameter vector plus the architecture that gives it shape.

    Entries are not checked for finiteness here: a poisoned update may carry
    overflowed values and must still reach verification, which rejects it.
    """

    values: np.ndarray
    architecture: Architecture

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or len(values) != self.architecture.n_params:
            raise ValueError(
                f"expected {self.architecture.n_params} parameters for "
                f"{self.architecture.layer_sizes}, got shape {values.shape}"
            )
        object.__setattr__(self, "values", values)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return _unpack(self.values, self.architecture)

    def to_bytes(self) -> bytes:
        """Little-endian checkpoint: u32 layer count, u32 sizes, then float64 values."""
        sizes = self.architecture.layer_sizes
        head = struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes)
        return head + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelParams":
        (n,) = struct.unpack_from("<I", raw, 0)
        sizes = struct.unpack_from(f"<{n}I", raw, 4)
        arch = Architecture(sizes)
        body = raw[4 + 4 * n :]
        if len(body) != 8 * arch.n_params:
            raise ValueError(f"checkpoint body holds {len(body)} bytes, expected {8 * arch.n_params}")
        return cls(np.frombuffer(body, dtype="<f8").astype(np.float64), arch)


class EvalResult(NamedTuple):
    mean_loss: float
    accuracy: float


def _unpack(values: np.ndarray, arch: Architecture) -> list[tuple[np.ndarray, np.ndarray]]:
    sizes = arch.layer_sizes
    return [
        (values[ws].reshape(a, b), values[bs])
        for (ws, bs), a, b in zip(arch.layer_slices(), sizes[:-1], sizes[1:])
    ]


def init_params(architecture: Architecture, seed: int) -> ModelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    values = np.zeros(architecture.n_params)
    for (ws, _), fan_in in zip(architecture.layer_slices(), architecture.layer_sizes[:-1]):
        bound = 1.0 / np.sqrt(fan_in)
        values[ws] = rng.uniform(-bound, bound, ws.stop - ws.start)
    return ModelParams(values, architecture)


def _check_features(params: ModelParams, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.architecture.n_inputs:
        raise ValueError(
            f"feature matrix of shape {x.shape} does not match input size "
            f"{params.architecture.n_inputs}"
        )
    return x


def _forward_cache(layers, x):
    acts = [x]
    h = x
    for w, b in layers[:-1]:
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    w, b = layers[-1]
    return acts, h @ w + b


def forward(params: ModelParams, features: np.ndarray) -> np.ndarray:
    x = _check_features(params, features)
    return _forward_cache(params.layers(), x)[1]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(
    params: ModelParams, features: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. the flat vector."""
    x = _check_features(params, features)
    y = np.asarray(labels, dtype=np.int64)
    n = len(y)
    if n == 0:
        raise ValueError("loss_and_grad needs a non-empty batch")
    if len(x) != n:
        raise ValueError(f"{len(x)} feature rows but {n} labels")
    arch = params.architecture
    layers = params.layers()
    acts, logits = _forward_cache(layers, x)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), y].mean())

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grad = np.empty(arch.n_params)
    slices = arch.layer_slices()
    for k in range(len(layers) - 1, -1, -1):
        ws, bs = slices[k]
        grad[ws] = (acts[k].T @ delta).ravel()
        grad[bs] = delta.sum(axis=0)
        if k:
            delta = (delta @ layers[k][0].T) * (acts[k] > 0)
    return loss, grad


def local_train(
    params: ModelParams,
    data: Dataset,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
) -> ModelParams:
    """Plain SGD from ``params`` on ``data``; a fresh seeded shuffle per epoch, last short batch kept."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be >= 1")
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    rng = np.random.default_rng(seed)
    w = params.values.copy()
    arch = params.architecture
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            _, g = loss_and_grad(ModelParams(w, arch), data.features[batch], data.labels[batch])
            w -= lr * g
    return ModelParams(w, arch)


def evaluate(params: ModelParams, data: Dataset) -> EvalResult:
    """Full-batch mean cross-entropy (natural log) and top-1 accuracy; ties pick the lowest class."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = forward(params, data.features)
    with np.errstate(over="ignore", invalid="ignore"):
        logp = _log_softmax(logits)
    n = len(data)
    loss = float(-logp[np.arange(n), data.labels].mean())
    correct = int(np.count_nonzero(logits.argmax(axis=1) == data.labels))
    return EvalResult(loss, correct / n)
