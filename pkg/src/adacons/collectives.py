"""In-process simulation of the synchronous collectives used by the aggregators.

The bus replaces a real interconnect with deterministic in-memory reductions
plus an exact element-count ledger.  What is verifiable at desk scale is the
communication *structure*, not wall-clock network time, so the ledger counts
scalar elements moved per collective:

    all_reduce_sum of length-d vectors   -> 1 call, d payload elements
    all_gather of per-worker scalars     -> 1 call, N gather elements

One consensus-weighted aggregation round therefore costs exactly
{2 all-reduce calls, 2*d elements; 1 all-gather, N elements}, while plain
averaging costs {1 all-reduce, d elements; no gather}.

Reduction order is fixed: contributions are accumulated in ring index order
(worker 0, 1, ..., N-1) regardless of how the caller assembled the list, so
results are bit-reproducible across runs with identical inputs.  Byte
conversion (x4 or x8 per element) is left to reporting code.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np


class CollectiveError(Exception):
    """Base class for collective-operation failures."""


class ParticipationError(CollectiveError):
    """A collective was invoked with fewer or more contributions than workers."""


class DimensionError(CollectiveError):
    """Contributions (or operands) disagree on vector length."""


class NumericError(CollectiveError):
    """A contribution contains NaN or infinity."""


@dataclass
class CommStats:
    """Cumulative communication ledger; all counters are monotone non-decreasing."""

    allreduce_calls: int = 0
    allgather_calls: int = 0
    payload_elements: int = 0
    gather_elements: int = 0

    def copy(self) -> "CommStats":
        return CommStats(
            self.allreduce_calls,
            self.allgather_calls,
            self.payload_elements,
            self.gather_elements,
        )

    def delta_since(self, earlier: "CommStats") -> "CommStats":
        """Ledger growth between an earlier snapshot and now."""
        return CommStats(
            self.allreduce_calls - earlier.allreduce_calls,
            self.allgather_calls - earlier.allgather_calls,
            self.payload_elements - earlier.payload_elements,
            self.gather_elements - earlier.gather_elements,
        )


class CollectiveBus:
    """Synchronous collective bus for a fixed group of ``worker_count`` workers.

    Every call is a synchronization point: it requires exactly one contribution
    per worker, indexed by worker rank.  The bus may be driven by a single
    thread that collected all contributions or by rendezvousing workers; either
    way the reduction runs in the fixed ring order and the ledger is updated
    atomically per collective.
    """

    def __init__(self, worker_count: int):
        if worker_count < 1:
            raise ValueError(f"worker_count must be >= 1, got {worker_count}")
        self._worker_count = int(worker_count)
        self._reduction_order = tuple(range(self._worker_count))
        self._ledger = CommStats()
        self._lock = threading.Lock()

    @property
    def worker_count(self) -> int:
        return self._worker_count

    @property
    def reduction_order(self) -> tuple[int, ...]:
        """Fixed ring permutation in which contributions are accumulated."""
        return self._reduction_order

    @property
    def ledger(self) -> CommStats:
        return self._ledger

    def snapshot(self) -> CommStats:
        """Copy of the ledger, for computing per-round deltas."""
        with self._lock:
            return self._ledger.copy()

    def all_reduce_sum(self, contributions: list[np.ndarray]) -> np.ndarray:
        """Elementwise sum of one length-d vector per worker.

        Accumulation follows ring index order, so the result is bit-stable for
        identical inputs.  Ledger: allreduce_calls += 1, payload_elements += d.
        """
        if len(contributions) != self._worker_count:
            raise ParticipationError(
                f"all_reduce_sum needs exactly {self._worker_count} contributions, "
                f"got {len(contributions)}"
            )
        vectors = [np.asarray(c, dtype=np.float64) for c in contributions]
        d = vectors[0].shape[-1] if vectors[0].ndim else 1
        for i, v in enumerate(vectors):
            if v.ndim != 1:
                raise DimensionError(f"contribution {i} is not a vector (ndim={v.ndim})")
            if v.shape[0] != vectors[0].shape[0]:
                raise DimensionError(
                    f"contribution {i} has length {v.shape[0]}, expected {vectors[0].shape[0]}"
                )
            if not np.all(np.isfinite(v)):
                raise NumericError(f"contribution {i} contains non-finite entries")
        d = vectors[0].shape[0]
        total = vectors[self._reduction_order[0]].copy()
        for rank in self._reduction_order[1:]:
            total += vectors[rank]
        with self._lock:
            self._ledger.allreduce_calls += 1
            self._ledger.payload_elements += d
        return total

    def all_gather(self, contributions: list[float]) -> np.ndarray:
        """Per-worker scalars concatenated in worker-index order.

        Ledger: allgather_calls += 1, gather_elements += N.
        """
        if len(contributions) != self._worker_count:
            raise ParticipationError(
                f"all_gather needs exactly {self._worker_count} contributions, "
                f"got {len(contributions)}"
            )
        gathered = np.asarray(contributions, dtype=np.float64)
        if gathered.ndim != 1:
            raise DimensionError("all_gather takes one scalar per worker")
        if not np.all(np.isfinite(gathered)):
            raise NumericError("all_gather contribution contains non-finite entries")
        with self._lock:
            self._ledger.allgather_calls += 1
            self._ledger.gather_elements += self._worker_count
        return gathered
