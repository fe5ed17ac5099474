"""Gradient aggregation operators: plain averaging and consensus weighting.

Given N worker gradients g_1..g_N at a shared iterate, the baseline aggregator
returns their mean.  The adaptive rule instead searches the subspace spanned by
the (norm-normalized) gradients: a single first-order step on the subspace
objective yields one coefficient per worker,

    raw_i = <g_i, gbar> / ||g_i||        with gbar = (1/N) sum_j g_j,

so directions agreeing with the consensus mean receive larger weight.  The raw
coefficients are optionally smoothed by an exponential moving average applied
in *sorted* coefficient space (making the smoothing invariant to worker
ordering), then rescaled so the final weights sum to one:

    u_i     = smoothed_i / ||g_i||
    gamma_i = u_i / sum_j u_j            (lambda = 1 / sum_j u_j)
    output  = sum_i gamma_i * g_i

Sum-to-one keeps the aggregate an unbiased reweighting of the worker
gradients; when normalization is disabled a fixed lambda multiplies u instead.
All coefficients are stored with positive sign; the descent minus sign belongs
to the optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .collectives import CollectiveBus, DimensionError


@dataclass
class GradientSet:
    """The N worker gradients spanning one aggregation round's subspace.

    ``directions`` has shape (N, d): one row per worker, all entries finite.
    """

    directions: np.ndarray

    def __post_init__(self):
        self.directions = np.ascontiguousarray(self.directions, dtype=np.float64)
        if self.directions.ndim != 2:
            raise DimensionError(
                f"directions must be a (workers, dimension) array, got ndim={self.directions.ndim}"
            )
        if self.directions.shape[0] < 1 or self.directions.shape[1] < 1:
            raise DimensionError(f"empty gradient set: shape {self.directions.shape}")
        if not np.all(np.isfinite(self.directions)):
            raise ValueError("gradient set contains non-finite entries")

    @classmethod
    def from_vectors(cls, vectors) -> "GradientSet":
        return cls(np.stack([np.asarray(v, dtype=np.float64) for v in vectors]))

    @property
    def worker_count(self) -> int:
        return self.directions.shape[0]

    @property
    def dimension(self) -> int:
        return self.directions.shape[1]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.directions, axis=1)


@dataclass
class Coefficients:
    """Per-worker coefficient vector at its three pipeline stages.

    ``raw`` are the first-order subspace coefficients, ``smoothed`` the
    post-momentum values redistributed to worker order (equal to ``raw`` when
    momentum is off), ``normalized`` the final weights applied to the
    gradients.  ``lam`` is the normalization scale (NaN when the uniform
    fallback replaced it or normalization was disabled) and ``fallback`` marks
    rounds where degeneracy forced uniform 1/N weights.
    """

    raw: np.ndarray
    smoothed: np.ndarray
    normalized: np.ndarray
    lam: float
    fallback: bool


@dataclass
class MomentumState:
    """Sorted-EMA buffer carried across iterations.

    ``sorted_ema`` lives in ascending-sorted coefficient space and therefore
    stays non-decreasing; ``beta`` is fixed for the state's lifetime.
    """

    worker_count: int
    beta: float
    sorted_ema: np.ndarray = field(init=False)
    initialized: bool = field(default=False, init=False)
    iteration: int = field(default=0, init=False)

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.worker_count < 1:
            raise ValueError(f"worker_count must be >= 1, got {self.worker_count}")
        self.sorted_ema = np.zeros(self.worker_count)


@dataclass
class AdaConsConfig:
    """Variant switches for the consensus aggregator.

    The four (use_momentum x use_normalization) combinations are the ablation
    variants; ``fallback_lambda`` is the fixed scale used when normalization is
    off (default 1).  ``epsilon`` guards degenerate denominators: zero-norm
    gradients get coefficient zero, and a vanishing or non-positive weight sum
    triggers the uniform 1/N fallback.
    """

    beta: float = 0.99
    use_momentum: bool = True
    use_normalization: bool = True
    epsilon: float = 1e-12
    fallback_lambda: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def mean_gradient(grads: GradientSet, bus: CollectiveBus) -> np.ndarray:
    """Consensus mean gbar = (1/N) sum_i g_i via one all-reduce."""
    total = bus.all_reduce_sum(list(grads.directions))
    return total / grads.worker_count


def raw_coefficients(
    grads: GradientSet, mean: np.ndarray, epsilon: float = 1e-12
) -> np.ndarray:
    """First-order subspace coefficients raw_i = <g_i, gbar> / ||g_i||.

    Workers with ||g_i|| < epsilon contribute nothing to the subspace and get
    coefficient zero.
    """
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape != (grads.dimension,):
        raise DimensionError(
            f"mean has shape {mean.shape}, expected ({grads.dimension},)"
        )
    norms = grads.norms()
    dots = grads.directions @ mean
    out = np.zeros(grads.worker_count)
    live = norms >= epsilon
    out[live] = dots[live] / norms[live]
    return out


def apply_momentum(raw: np.ndarray, state: MomentumState) -> np.ndarray:
    """Smooth coefficients with an EMA in sorted space, then unsort.

    Let sigma be the ascending sort permutation of ``raw`` (stable, ties broken
    by worker index).  The first call initializes the buffer to sort(raw); later
    calls update

        sorted_ema <- beta * sorted_ema + (1 - beta) * sort(raw)

    and the smoothed values are redistributed through the inverse of the
    *current* iteration's permutation, so the smoothed distribution follows the
    coefficient statistics rather than any particular worker index.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (state.worker_count,):
        raise DimensionError(
            f"coefficient vector has shape {raw.shape}, expected ({state.worker_count},)"
        )
    order = np.argsort(raw, kind="stable")
    sorted_raw = raw[order]
    if not state.initialized:
        state.sorted_ema = sorted_raw.copy()
        state.initialized = True
    else:
        state.sorted_ema = state.beta * state.sorted_ema + (1.0 - state.beta) * sorted_raw
    state.iteration += 1
    out = np.empty_like(state.sorted_ema)
    out[order] = state.sorted_ema
    return out


def normalize_unbiased(
    smoothed: np.ndarray,
    grads: GradientSet,
    epsilon: float = 1e-12,
    squared_denominator: bool = True,
) -> tuple[np.ndarray, float, bool]:
    """Rescale coefficients so the gradient weights sum to one.

    The weight before scaling is u_i = smoothed_i / ||g_i|| (zero for
    zero-norm gradients), i.e. the reprojection of the subspace coefficient
    through the normalized column.  Then gamma_i = u_i / sum(u) and
    lambda = 1 / sum(u), so sum(gamma) = 1 up to rounding.

    Degenerate rounds (|sum u| < epsilon or sum u <= 0: the linearization is
    unreliable) return the uniform fallback gamma_i = 1/N with the fallback
    flag set and lambda = NaN.

    ``squared_denominator=False`` is a comparison-only toggle that computes
    lambda from sum(smoothed) instead of sum(u); the sum-to-one property does
    not hold in that mode.

    Returns (gamma, lambda, fallback).
    """
    smoothed = np.asarray(smoothed, dtype=np.float64)
    if smoothed.shape != (grads.worker_count,):
        raise DimensionError(
            f"coefficient vector has shape {smoothed.shape}, expected ({grads.worker_count},)"
        )
    n = grads.worker_count
    norms = grads.norms()
    u = np.zeros(n)
    live = norms >= epsilon
    u[live] = smoothed[live] / norms[live]

    denom = float(np.sum(u)) if squared_denominator else float(np.sum(smoothed))
    if abs(denom) < epsilon or denom <= 0.0:
        return np.full(n, 1.0 / n), float("nan"), True
    return u / denom, 1.0 / denom, False


def aggregate_average(grads: GradientSet, bus: CollectiveBus) -> np.ndarray:
    """Baseline aggregator: the plain gradient mean (one all-reduce)."""
    return mean_gradient(grads, bus)


def aggregate_adacons(
    grads: GradientSet,
    state: MomentumState | None,
    config: AdaConsConfig,
    bus: CollectiveBus,
) -> tuple[np.ndarray, Coefficients]:
    """Full consensus-weighted aggregation round.

    Pipeline: mean via all-reduce -> raw coefficients -> all-gather of the
    per-worker coefficients -> sorted-EMA momentum (optional) -> sum-to-one
    normalization (or fixed-lambda scaling) -> weighted sum via a second
    all-reduce.  Ledger cost per round: 2 all-reduce calls moving 2*d elements
    plus 1 all-gather moving N scalars.

    Returns the aggregated direction and the full coefficient record.
    """
    if bus.worker_count != grads.worker_count:
        raise DimensionError(
            f"bus has {bus.worker_count} workers, gradient set has {grads.worker_count}"
        )
    mean = mean_gradient(grads, bus)
    raw = raw_coefficients(grads, mean, config.epsilon)
    # Each worker computes its own coefficient locally; the gather shares the
    # full vector so every worker can run the identical momentum/normalization.
    gathered = bus.all_gather(list(raw))

    if config.use_momentum:
        if state is None:
            raise ValueError("use_momentum requires a MomentumState")
        smoothed = apply_momentum(gathered, state)
    else:
        smoothed = gathered.copy()

    if config.use_normalization:
        gamma, lam, fallback = normalize_unbiased(smoothed, grads, config.epsilon)
    else:
        norms = grads.norms()
        u = np.zeros(grads.worker_count)
        live = norms >= config.epsilon
        u[live] = smoothed[live] / norms[live]
        gamma = config.fallback_lambda * u
        lam, fallback = float("nan"), False

    weighted = [gamma[i] * grads.directions[i] for i in range(grads.worker_count)]
    direction = bus.all_reduce_sum(weighted)
    coeffs = Coefficients(
        raw=gathered, smoothed=smoothed, normalized=gamma, lam=lam, fallback=fallback
    )
    return direction, coeffs


def preconditioner_apply(
    grads: GradientSet, vector: np.ndarray, lam: float = 1.0, epsilon: float = 1e-12
) -> np.ndarray:
    """Apply G = lam * sum_i g_i g_i^T / ||g_i||^2 to a vector.

    G is the operator through which the consensus rule acts on the mean
    gradient: a scaled sum of rank-one projections onto the normalized worker
    directions, hence symmetric positive semidefinite.  Zero-norm columns
    contribute nothing.  Analysis utility, not on the training path.
    """
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (grads.dimension,):
        raise DimensionError(
            f"vector has shape {vector.shape}, expected ({grads.dimension},)"
        )
    norms = grads.norms()
    live = norms >= epsilon
    if not np.any(live):
        return np.zeros(grads.dimension)
    P = grads.directions[live]
    scaled = (P @ vector) / norms[live] ** 2
    return lam * (P.T @ scaled)
