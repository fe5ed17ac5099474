"""Synchronous data-parallel training loop over a simulated collective bus.

Each iteration every worker samples its batch and evaluates its gradient at
the *same* current parameter vector, the configured aggregator combines the
gradients through the bus, and a single step w <- w - eta * direction is
applied.  Traces record the exact population objective, coefficient
statistics, the per-iteration communication ledger delta, and wall time.

Runs are bit-reproducible given (config, spec): batches come from keyed
streams, the bus reduces in fixed ring order, and worker execution (sequential
loop or thread pool) cannot change any recorded value except wall time.
"""

from __future__ import annotations

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .aggregation import (
    AdaConsConfig,
    GradientSet,
    MomentumState,
    aggregate_adacons,
    aggregate_average,
)
from .collectives import CollectiveBus
from .problems import ProblemSpec, exact_line_search, initial_point, local_gradient, sample_batch, true_objective

AGGREGATORS = ("average", "adacons")
STEP_RULES = ("exact_line_search", "fixed")
WORKER_MODES = ("sequential", "threads")


class TrainingAborted(RuntimeError):
    """A run hit a non-finite quantity; divergence is diagnostic signal, not noise."""

    def __init__(self, iteration: int, quantity: str, detail: str = ""):
        self.iteration = iteration
        self.quantity = quantity
        msg = f"aborted at iteration {iteration}: non-finite {quantity}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@dataclass
class RunConfig:
    """One training run: worker topology, aggregator, step rule, seed.

    ``seed`` keys the parameter initialization; the data streams are keyed by
    the problem spec's own seed, so every aggregator sees identical batches
    when both seeds are held fixed.
    """

    worker_count: int = 1
    local_batch: int = 1
    iterations: int = 1
    aggregator: str = "average"
    adacons: AdaConsConfig = field(default_factory=AdaConsConfig)
    step_rule: str = "exact_line_search"
    step_size: float | None = None
    seed: int = 0
    record_coefficient_stats: bool = True
    worker_mode: str = "sequential"

    def __post_init__(self):
        if self.worker_count < 1 or self.local_batch < 1 or self.iterations < 1:
            raise ValueError("worker_count, local_batch and iterations must all be >= 1")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}, expected one of {AGGREGATORS}")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"unknown step_rule {self.step_rule!r}, expected one of {STEP_RULES}")
        if self.step_rule == "fixed" and (self.step_size is None or self.step_size <= 0):
            raise ValueError("fixed step rule requires a positive step_size")
        if self.worker_mode not in WORKER_MODES:
            raise ValueError(f"unknown worker_mode {self.worker_mode!r}, expected one of {WORKER_MODES}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")

    @property
    def effective_batch(self) -> int:
        return self.worker_count * self.local_batch

    @classmethod
    def from_effective_batch(cls, worker_count: int, effective_batch: int, **kwargs) -> "RunConfig":
        if effective_batch % worker_count != 0:
            raise ValueError(
                f"effective_batch {effective_batch} is not divisible by worker_count {worker_count}"
            )
        return cls(worker_count=worker_count, local_batch=effective_batch // worker_count, **kwargs)


@dataclass
class IterationRecord:
    """One trace row; field names match the CSV schema."""

    iteration: int
    objective: float
    coeff_mean_raw: float
    coeff_std_raw: float
    coeff_mean_smoothed: float
    coeff_std_smoothed: float
    coeff_mean_norm: float
    coeff_std_norm: float
    lam: float
    fallback: bool
    allreduce_elems: int
    allgather_elems: int
    wall_time_s: float


@dataclass
class TrainTrace:
    """Complete per-iteration record of one run."""

    records: list[IterationRecord]
    initial_objective: float
    final_parameters: np.ndarray
    batch_digest: str

    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    @property
    def final_objective(self) -> float:
        return self.records[-1].objective

    @property
    def fallback_count(self) -> int:
        return sum(r.fallback for r in self.records)


def _coefficient_stats(values: np.ndarray) -> tuple[float, float]:
    return float(np.mean(values)), float(np.std(values))


def run(config: RunConfig, spec: ProblemSpec, sampler=None) -> TrainTrace:
    """Execute one synchronous training run and return its trace.

    ``sampler`` is a test hook with the signature of
    ``problems.sample_batch``; the default keyed sampler gives every worker its
    own stream, while tests may force shared or corrupted batches.
    Aborts with :class:`TrainingAborted` on any non-finite gradient, direction
    or objective.
    """
    if sampler is None:
        sampler = sample_batch
    n = config.worker_count
    bus = CollectiveBus(n)
    state = MomentumState(n, config.adacons.beta)
    w = initial_point(spec, config.seed)
    digest = hashlib.sha256()
    records: list[IterationRecord] = []
    initial_objective = true_objective(w)
    pool = ThreadPoolExecutor(max_workers=n) if config.worker_mode == "threads" else None

    def worker_task(worker: int, iteration: int, params: np.ndarray):
        batch = sampler(spec, worker, iteration, config.local_batch)
        return batch, local_gradient(params, batch)

    try:
        for t in range(1, config.iterations + 1):
            tick = time.perf_counter()
            if pool is not None:
                results = list(pool.map(lambda i: worker_task(i, t, w), range(n)))
            else:
                results = [worker_task(i, t, w) for i in range(n)]
            gradients = []
            for i, (batch, grad) in enumerate(results):
                digest.update(batch.samples.tobytes())
                if not np.all(np.isfinite(grad)):
                    raise TrainingAborted(t, "gradient", f"worker {i}")
                gradients.append(grad)
            grads = GradientSet.from_vectors(gradients)

            before = bus.snapshot()
            if config.aggregator == "average":
                direction = aggregate_average(grads, bus)
                coeffs = None
            else:
                direction, coeffs = aggregate_adacons(grads, state, config.adacons, bus)
            comm = bus.snapshot().delta_since(before)
            if not np.all(np.isfinite(direction)):
                raise TrainingAborted(t, "direction")

            if config.step_rule == "exact_line_search":
                eta = exact_line_search(w, direction)
            else:
                eta = config.step_size
            w = w - eta * direction
            objective = true_objective(w)
            if not np.isfinite(objective):
                raise TrainingAborted(t, "objective", f"value {objective}")

            if coeffs is not None and config.record_coefficient_stats:
                mean_raw, std_raw = _coefficient_stats(coeffs.raw)
                mean_smooth, std_smooth = _coefficient_stats(coeffs.smoothed)
                mean_norm, std_norm = _coefficient_stats(coeffs.normalized)
            else:
                mean_raw = std_raw = mean_smooth = std_smooth = mean_norm = std_norm = float("nan")
            records.append(
                IterationRecord(
                    iteration=t,
                    objective=objective,
                    coeff_mean_raw=mean_raw,
                    coeff_std_raw=std_raw,
                    coeff_mean_smoothed=mean_smooth,
                    coeff_std_smoothed=std_smooth,
                    coeff_mean_norm=mean_norm,
                    coeff_std_norm=std_norm,
                    lam=coeffs.lam if coeffs is not None else float("nan"),
                    fallback=coeffs.fallback if coeffs is not None else False,
                    allreduce_elems=comm.payload_elements,
                    allgather_elems=comm.gather_elements,
                    wall_time_s=time.perf_counter() - tick,
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()

    return TrainTrace(
        records=records,
        initial_objective=initial_objective,
        final_parameters=w,
        batch_digest=digest.hexdigest(),
    )


ABLATION_VARIANTS = {
    "raw": dict(use_momentum=False, use_normalization=False),
    "momentum": dict(use_momentum=True, use_normalization=False),
    "normalization": dict(use_momentum=False, use_normalization=True),
    "momentum_normalization": dict(use_momentum=True, use_normalization=True),
}


def run_ablation_matrix(base: RunConfig, spec: ProblemSpec, sampler=None) -> dict[str, TrainTrace]:
    """Run the averaging baseline plus all four consensus variants.

    Every trace shares the same seeds, so the batch streams are bit-identical
    across variants (checkable via the trace digests).
    """
    traces: dict[str, TrainTrace] = {}
    traces["average"] = run(replace(base, aggregator="average"), spec, sampler=sampler)
    for label, switches in ABLATION_VARIANTS.items():
        variant = replace(
            base,
            aggregator="adacons",
            adacons=replace(base.adacons, **switches),
        )
        traces[label] = run(variant, spec, sampler=sampler)
    return traces
