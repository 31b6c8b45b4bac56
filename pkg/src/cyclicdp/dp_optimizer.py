"""DP-SGD pieces: batch sampling, per-example clipping, the noisy update."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn_core import Batch, ModelParams

SAMPLING_MODES = ("poisson", "with_replacement")


@dataclass(frozen=True)
class DpSgdConfig:
    noise_multiplier: float
    batch_size: int
    learning_rate: float
    clip_norm: float = 1.0
    sampling: str = "poisson"

    def __post_init__(self):
        if not self.noise_multiplier >= 0:
            raise ValueError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch_size must be a positive integer, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"sampling must be one of {SAMPLING_MODES}, got {self.sampling!r}")

    @classmethod
    def with_coupled_clip(cls, noise_multiplier, batch_size, learning_rate, sampling="poisson"):
        """Couple the clip norm to sigma / b as in the original parameter list."""
        return cls(noise_multiplier, batch_size, learning_rate,
                   noise_multiplier / batch_size, sampling)


class NoiseSource:
    """Seeded generator that hands out an independent substream per step.

    Every call to :meth:`next_stream` spawns a child of the same
    ``SeedSequence``, so step t always sees the same random numbers for a
    given seed regardless of how many draws earlier steps made.
    """

    def __init__(self, seed):
        self._seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self.streams_used = 0

    def next_stream(self) -> np.random.Generator:
        (child,) = self._seq.spawn(1)
        self.streams_used += 1
        return np.random.default_rng(child)


def sample_indices(n: int, cfg: DpSgdConfig, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("cannot sample from an empty dataset")
    if cfg.sampling == "with_replacement":
        return rng.integers(0, n, size=cfg.batch_size)
    q = min(1.0, cfg.batch_size / n)
    return np.flatnonzero(rng.random(n) < q)


def sample_batch(features, labels, cfg: DpSgdConfig, rng: np.random.Generator) -> Batch | None:
    """Draw one batch; Poisson sampling may come back empty, returned as None."""
    idx = sample_indices(len(labels), cfg, rng)
    if idx.size == 0:
        return None
    return Batch(features[idx], labels[idx])


def clip_gradient(g: np.ndarray, clip_norm: float) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    return clip_gradients(g[None, :], clip_norm)[0]


def clip_gradients(grads: np.ndarray, clip_norm: float) -> np.ndarray:
    """Row-wise g / max(1, ||g|| / C), with the bound ||out|| <= C holding exactly."""
    grads = np.asarray(grads, dtype=np.float64)
    if not np.isfinite(grads).all():
        raise ValueError("gradient contains non-finite values")
    norms = np.linalg.norm(grads, axis=1)
    out = grads / np.maximum(1.0, norms / clip_norm)[:, None]
    # rows at the boundary land a few ulps inside it, so ||out|| <= C holds however
    # the squares are summed
    edge = norms > clip_norm * (1.0 - 2.0**-44)
    out[edge] *= 1.0 - 2.0**-44
    return out


def _as_matrix(params: ModelParams, per_example_grads) -> np.ndarray:
    if per_example_grads is None or len(per_example_grads) == 0:
        return np.zeros((0, params.spec.n_params))
    grads = np.asarray(per_example_grads, dtype=np.float64)
    if grads.ndim != 2 or grads.shape[1] != params.spec.n_params:
        raise ValueError(
            f"expected gradients of length {params.spec.n_params}, got shape {grads.shape}"
        )
    return grads


def noisy_step(params: ModelParams, per_example_grads, cfg: DpSgdConfig,
               rng: np.random.Generator) -> ModelParams:
    """theta - lr * (sum_i clip(g_i) + N(0, sigma^2 C^2 I)) / b.

    Divides by the configured batch size even when a Poisson batch came out
    smaller or empty; an empty batch still takes the noise-only step.
    """
    grads = _as_matrix(params, per_example_grads)
    clipped = clip_gradients(grads, cfg.clip_norm) if len(grads) else grads
    # axis-0 reduction on a C-ordered array adds rows in order
    total = clipped.sum(axis=0) if len(clipped) else np.zeros(params.spec.n_params)
    noise = rng.standard_normal(params.spec.n_params)
    if cfg.noise_multiplier > 0:
        total = total + noise * (cfg.noise_multiplier * cfg.clip_norm)
    update = total / cfg.batch_size
    return ModelParams.unflatten(params.spec, params.flatten() - cfg.learning_rate * update)


def plain_step(params: ModelParams, per_example_grads, cfg: DpSgdConfig) -> ModelParams:
    """Ordinary minibatch SGD on the mean gradient; no clipping, no noise."""
    grads = _as_matrix(params, per_example_grads)
    if len(grads) == 0:
        return params
    if not np.isfinite(grads).all():
        raise ValueError("gradient contains non-finite values")
    mean = grads.sum(axis=0) / len(grads)
    return ModelParams.unflatten(params.spec, params.flatten() - cfg.learning_rate * mean)


def update_noise_std(cfg: DpSgdConfig) -> float:
    """Per-coordinate std of the noise in one update, before the learning rate."""
    if math.isinf(cfg.clip_norm):
        return math.inf if cfg.noise_multiplier > 0 else 0.0
    return cfg.noise_multiplier * cfg.clip_norm / cfg.batch_size
