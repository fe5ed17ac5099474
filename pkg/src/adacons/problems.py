"""Stochastic linear regression with per-worker data sharding.

The objective is the population risk F(w) = E[ (w^T z)^2 / 2 ] over
z ~ U[0,1]^d, whose second moment A = E[z z^T] is known in closed form:
1/3 on the diagonal and 1/4 off it, i.e.

    A = (1/12) I + (1/4) 1 1^T,      A v = v/12 + (sum v / 4) 1.

That structure gives an O(d) exact objective, an exact gradient A w, and an
analytical step size along any direction, so convergence curves are noise-free
and comparisons are seed-robust.

Batches are drawn from counter-based streams keyed by (seed, worker,
iteration): reruns are bit-reproducible and workers can sample concurrently
without perturbing each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collectives import DimensionError

# Stream tag separating the parameter-init draw from batch streams.
_INIT_STREAM_TAG = 0x1217


@dataclass
class ProblemSpec:
    """Problem identifier, dimension, and base RNG seed."""

    dimension: int = 1000
    kind: str = "linear_regression"
    seed: int = 0

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError(f"dimension must be >= 1, got {self.dimension}")
        if self.kind != "linear_regression":
            raise ValueError(f"unknown problem kind: {self.kind!r}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


@dataclass
class Batch:
    """B i.i.d. samples from U[0,1]^d owned by one worker at one iteration."""

    samples: np.ndarray
    worker_index: int
    iteration: int

    @property
    def size(self) -> int:
        return self.samples.shape[0]


def _stream(*key: int) -> np.random.Generator:
    # Philox is counter-based; keying by the full tuple keeps worker and
    # iteration streams disjoint under any execution order.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def sample_batch(
    spec: ProblemSpec, worker: int, iteration: int, local_batch: int
) -> Batch:
    """Draw the worker's batch for one iteration, deterministic in (seed, worker, iteration)."""
    if local_batch < 1:
        raise ValueError(f"local_batch must be >= 1, got {local_batch}")
    rng = _stream(spec.seed, worker, iteration)
    samples = rng.random((local_batch, spec.dimension))
    return Batch(samples=samples, worker_index=worker, iteration=iteration)


def initial_point(spec: ProblemSpec, seed: int) -> np.ndarray:
    """Starting parameters: i.i.d. standard normal entries scaled by 1/sqrt(d)."""
    rng = _stream(seed, _INIT_STREAM_TAG)
    return rng.standard_normal(spec.dimension) / np.sqrt(spec.dimension)


def batch_objective(w: np.ndarray, batch: Batch) -> float:
    """Empirical loss (1/B) sum_s (w^T z_s)^2 / 2 on one batch."""
    residuals = batch.samples @ w
    return float(0.5 * np.mean(residuals**2))


def local_gradient(w: np.ndarray, batch: Batch) -> np.ndarray:
    """Empirical gradient (1/B) sum_s (w^T z_s) z_s of the batch loss."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (batch.samples.shape[1],):
        raise DimensionError(
            f"parameters have shape {w.shape}, batch dimension is {batch.samples.shape[1]}"
        )
    residuals = batch.samples @ w
    return batch.samples.T @ residuals / batch.size


def second_moment_matvec(v: np.ndarray) -> np.ndarray:
    """A v for the closed-form uniform second moment, in O(d)."""
    v = np.asarray(v, dtype=np.float64)
    return v / 12.0 + 0.25 * np.sum(v)


def true_objective(w: np.ndarray) -> float:
    """Exact population objective F(w) = w^T A w / 2."""
    w = np.asarray(w, dtype=np.float64)
    return float(0.5 * (w @ second_moment_matvec(w)))


def exact_line_search(
    w: np.ndarray, direction: np.ndarray, epsilon: float = 1e-30
) -> float:
    """Analytical minimizer of F(w - eta * direction) over eta.

    For the quadratic objective this is eta* = (d^T A w) / (d^T A d);
    degenerate directions (curvature below epsilon) return step 0.
    """
    w = np.asarray(w, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if w.shape != direction.shape:
        raise DimensionError(
            f"parameters {w.shape} and direction {direction.shape} disagree"
        )
    Ad = second_moment_matvec(direction)
    curvature = float(direction @ Ad)
    if curvature < epsilon:
        return 0.0
    return float(Ad @ w) / curvature
