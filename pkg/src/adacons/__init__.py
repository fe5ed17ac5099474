"""Consensus-weighted gradient aggregation for synchronous data-parallel training.

Workers' gradients are combined by weighting each one by its agreement with
the mean direction, smoothed by a sort-invariant EMA and normalized so the
weights sum to one.  Collectives are simulated in-process with exact element
accounting, so communication cost claims are testable.
"""

from .aggregation import (
    AdaConsConfig,
    Coefficients,
    GradientSet,
    MomentumState,
    aggregate_adacons,
    aggregate_average,
    apply_momentum,
    mean_gradient,
    normalize_unbiased,
    preconditioner_apply,
    raw_coefficients,
)
from .collectives import (
    CollectiveBus,
    CollectiveError,
    CommStats,
    DimensionError,
    NumericError,
    ParticipationError,
)
from .engine import (
    IterationRecord,
    RunConfig,
    TrainingAborted,
    TrainTrace,
    run,
    run_ablation_matrix,
)
from .problems import (
    Batch,
    ProblemSpec,
    batch_objective,
    exact_line_search,
    initial_point,
    local_gradient,
    sample_batch,
    second_moment_matvec,
    true_objective,
)

__all__ = [
    "AdaConsConfig",
    "Batch",
    "Coefficients",
    "CollectiveBus",
    "CollectiveError",
    "CommStats",
    "DimensionError",
    "GradientSet",
    "IterationRecord",
    "MomentumState",
    "NumericError",
    "ParticipationError",
    "ProblemSpec",
    "RunConfig",
    "TrainTrace",
    "TrainingAborted",
    "aggregate_adacons",
    "aggregate_average",
    "apply_momentum",
    "batch_objective",
    "exact_line_search",
    "initial_point",
    "local_gradient",
    "mean_gradient",
    "normalize_unbiased",
    "preconditioner_apply",
    "raw_coefficients",
    "run",
    "run_ablation_matrix",
    "sample_batch",
    "second_moment_matvec",
    "true_objective",
]

__version__ = "0.1.0"
