"""Small feed-forward binary classifier with per-example backpropagation.

Parameters are kept as plain numpy arrays; every gradient routine returns
flat vectors in the same layout as :meth:`ModelParams.flatten` so the
optimizer can clip and noise them without knowing the network shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

PROB_EPS = 1e-7

_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ArchitectureSpec:
    """Layer widths from input to the single sigmoid output unit."""

    layer_sizes: tuple[int, ...]
    hidden_activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError(f"need at least 2 layer sizes, got {sizes}")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be >= 1, got {sizes}")
        if sizes[-1] != 1:
            raise ValueError(f"output layer must have 1 unit, got {sizes[-1]}")
        if self.hidden_activation not in _ACTIVATIONS:
            raise ValueError(
                f"hidden_activation must be one of {_ACTIVATIONS}, "
                f"got {self.hidden_activation!r}"
            )

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        """(out, in) for every weight matrix."""
        return list(zip(self.layer_sizes[1:], self.layer_sizes[:-1]))

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes)


@dataclass
class ModelParams:
    spec: ArchitectureSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.spec.shapes) or len(self.biases) != len(self.spec.shapes):
            raise ValueError("number of layers does not match the architecture")
        for (o, i), w, b in zip(self.spec.shapes, self.weights, self.biases):
            if w.shape != (o, i) or b.shape != (o,):
                raise ValueError(
                    f"layer shape mismatch: expected ({o}, {i}) and ({o},), "
                    f"got {w.shape} and {b.shape}"
                )

    def flatten(self) -> np.ndarray:
        """Concatenate layer by layer: weights row-major, then biases."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts).astype(np.float64, copy=True)

    @classmethod
    def unflatten(cls, spec: ArchitectureSpec, vector: np.ndarray) -> "ModelParams":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (spec.n_params,):
            raise ValueError(
                f"expected a flat vector of length {spec.n_params}, got shape {vector.shape}"
            )
        weights, biases = [], []
        pos = 0
        for o, i in spec.shapes:
            weights.append(vector[pos : pos + o * i].reshape(o, i).copy())
            pos += o * i
            biases.append(vector[pos : pos + o].copy())
            pos += o
        return cls(spec, weights, biases)

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() for w in self.weights) and all(
            np.isfinite(b).all() for b in self.biases
        )


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"features must be a non-empty 2-D array, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError(f"labels must have shape ({x.shape[0]},), got {y.shape}")
        if not np.isfinite(x).all():
            raise ValueError("features contain non-finite values")
        if not np.isin(y, (0.0, 1.0)).all():
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.features.shape[0]


def init_params(spec: ArchitectureSpec, seed: int) -> ModelParams:
    """Glorot-uniform weights on +-sqrt(6 / (fan_in + fan_out)), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for o, i in spec.shapes:
        limit = np.sqrt(6.0 / (i + o))
        weights.append(rng.uniform(-limit, limit, size=(o, i)))
        biases.append(np.zeros(o))
    return ModelParams(spec, weights, biases)


def _check_features(params: ModelParams, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ValueError(
            f"expected features with {params.spec.input_dim} columns, got shape {x.shape}"
        )
    if not np.isfinite(x).all():
        raise ValueError("features contain non-finite values")
    return x


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activate_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def _forward_cache(params: ModelParams, x: np.ndarray):
    kind = params.spec.hidden_activation
    acts = [x]
    pre = []
    a = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        pre.append(z)
        if k < last:
            a = _activate(kind, z)
            acts.append(a)
    return acts, pre


def logits(params: ModelParams, features) -> np.ndarray:
    x = _check_features(params, features)
    _, pre = _forward_cache(params, x)
    return pre[-1][:, 0]


def forward(params: ModelParams, features) -> np.ndarray:
    """Clamped positive-class probabilities, one per row."""
    return np.clip(expit(logits(params, features)), PROB_EPS, 1.0 - PROB_EPS)


def _bce(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def example_loss(params: ModelParams, x, y) -> float:
    """Binary cross-entropy of one example."""
    y = float(y)
    if y not in (0.0, 1.0):
        raise ValueError(f"label must be 0 or 1, got {y}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("example_loss takes a single feature vector")
    p = forward(params, x)
    return float(_bce(p, np.array([y]))[0])


def batch_losses(params: ModelParams, batch: Batch) -> np.ndarray:
    return _bce(forward(params, batch.features), batch.labels)


def mean_loss(params: ModelParams, batch: Batch) -> float:
    return float(np.mean(batch_losses(params, batch)))


def per_example_gradients(
    params: ModelParams, batch: Batch, return_losses: bool = False
):
    """Gradient of each example's loss, shape (len(batch), n_params).

    Row i is the flattened gradient of ``example_loss`` at example i. The
    backward pass is vectorised over rows but never sums across them, so
    clipping downstream sees each example's own gradient. The logit gradient
    uses the unclamped sigmoid (p - y); it agrees with the clamped loss
    wherever the clamp is inactive.
    """
    x = _check_features(params, batch.features)
    y = batch.labels
    kind = params.spec.hidden_activation
    acts, pre = _forward_cache(params, x)
    p = expit(pre[-1][:, 0])
    delta = (p - y)[:, None]  # (b, 1)

    n_layers = len(params.weights)
    blocks: list[np.ndarray] = [None] * (2 * n_layers)  # type: ignore[list-item]
    for k in range(n_layers - 1, -1, -1):
        a_in = acts[k]
        gw = delta[:, :, None] * a_in[:, None, :]  # (b, out, in)
        blocks[2 * k] = gw.reshape(len(x), -1)
        blocks[2 * k + 1] = delta
        if k > 0:
            back = delta @ params.weights[k]
            delta = back * _activate_grad(kind, pre[k - 1], acts[k])
    grads = np.concatenate(blocks, axis=1)
    if return_losses:
        return grads, _bce(np.clip(p, PROB_EPS, 1.0 - PROB_EPS), y)
    return grads


def mean_gradient(params: ModelParams, batch: Batch) -> np.ndarray:
    return per_example_gradients(params, batch).mean(axis=0)


def to_batch(features: Sequence, labels: Sequence) -> Batch:
    return Batch(np.asarray(features, dtype=np.float64), np.asarray(labels, dtype=np.float64))
