"""Command-line front end: experiment matrices, per-run CSV traces, summaries.

Exit codes: 0 success, 1 usage error, 2 numeric abort.
"""

from __future__ import annotations

import argparse
import os
import statistics
import sys
from dataclasses import dataclass
from itertools import product
from pathlib import Path

from .aggregation import AdaConsConfig
from .engine import RunConfig, TrainingAborted, TrainTrace, run, run_ablation_matrix
from .problems import ProblemSpec

CSV_HEADER = (
    "iteration,objective,coeff_mean_raw,coeff_std_raw,"
    "coeff_mean_smoothed,coeff_std_smoothed,coeff_mean_norm,coeff_std_norm,"
    "lambda,fallback,allreduce_elems,allgather_elems,wall_time_s"
)

OUTPUT_DIR_ENV = "ADACONS_OUTPUT_DIR"

# CLI aggregator token -> (engine aggregator, consensus switches).
# "sum" is the conventional name for the all-reduce baseline; the engine
# divides by N, which exact line search makes equivalent.
AGGREGATOR_TOKENS = {
    "sum": ("average", {}),
    "average": ("average", {}),
    "adacons": ("adacons", dict(use_momentum=True, use_normalization=True)),
    "adacons_raw": ("adacons", dict(use_momentum=False, use_normalization=False)),
    "adacons_momentum": ("adacons", dict(use_momentum=True, use_normalization=False)),
    "adacons_normalized": ("adacons", dict(use_momentum=False, use_normalization=True)),
}

# engine.run_ablation_matrix variant key -> CLI token used in file names.
ABLATION_LABELS = {
    "average": "average",
    "raw": "adacons_raw",
    "momentum": "adacons_momentum",
    "normalization": "adacons_normalized",
    "momentum_normalization": "adacons",
}

DEFAULTS = {
    "workers": "1",
    "effective-batch": "64",
    "dim": "1000",
    "iters": "500",
    "aggregator": "adacons",
    "beta": "0.99",
    "seeds": "0",
    "step-rule": "exact_line_search",
    "step-size": None,
    "csv": None,
    "output-dir": None,
    "bytes-per-element": "8",
    "worker-mode": "sequential",
}

_FILE_KEYS = frozenset(DEFAULTS) | {"seed", "ablation", "record-coefficient-stats"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; 2 is reserved for numeric aborts here.
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="adacons", description=__doc__.splitlines()[0])
    add = parser.add_argument
    add("--config", metavar="FILE", help="flat key=value file; flags override its entries")
    add("--workers", help="comma-separated worker counts, e.g. 8,32")
    add("--effective-batch", help="comma-separated effective batch sizes (workers x local batch)")
    add("--dim", help="problem dimension")
    add("--iters", help="iterations per run")
    add("--aggregator", help="comma-separated names: " + ",".join(AGGREGATOR_TOKENS))
    add("--beta", help="momentum decay, in (0,1)")
    add("--seed", help="single seed (shorthand for --seeds)")
    add("--seeds", help="seed list: 7 or 1,3,9 or 1..5")
    add("--step-rule", help="exact_line_search or fixed")
    add("--step-size", help="step size for the fixed rule")
    add("--csv", metavar="FILE", help="trace output path; single-run matrices only")
    add("--output-dir", help=f"output directory (overrides ${OUTPUT_DIR_ENV}; default results)")
    add("--ablation", action="store_true", help="run all consensus variants plus the baseline per cell")
    add("--record-coefficient-stats", action="store_true", help="populate coefficient statistics columns")
    add("--bytes-per-element", help="scalar width used for byte reporting (default 8)")
    add("--worker-mode", help="sequential or threads")
    return parser


def _parse_bool(text: str, key: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise UsageError(f"{key}: expected a boolean, got {text!r}")


def _parse_int(text: str, key: str, minimum: int = 1) -> int:
    try:
        value = int(text)
    except ValueError:
        raise UsageError(f"{key}: expected an integer, got {text!r}") from None
    if value < minimum:
        raise UsageError(f"{key}: must be >= {minimum}, got {value}")
    return value


def _parse_int_list(text: str, key: str) -> list[int]:
    values = [_parse_int(tok, key) for tok in text.split(",") if tok.strip() != ""]
    if not values:
        raise UsageError(f"{key}: empty list")
    return values


def _parse_seeds(text: str) -> list[int]:
    if ".." in text:
        lo_text, _, hi_text = text.partition("..")
        try:
            lo, hi = int(lo_text), int(hi_text)
        except ValueError:
            raise UsageError(f"seeds: expected LO..HI, got {text!r}") from None
        if hi < lo:
            raise UsageError(f"seeds: empty range {text!r}")
        return list(range(lo, hi + 1))
    return [_parse_int(tok, "seeds", minimum=0) for tok in text.split(",") if tok.strip() != ""]


def _read_config_file(path: str) -> dict[str, str]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as err:
        raise UsageError(f"config: cannot read {path}: {err}") from None
    values: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        key = key.strip().replace("_", "-")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        if key not in _FILE_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value.strip()
    return values


@dataclass
class ExperimentMatrix:
    """Fully resolved sweep: workers x effective batch x aggregator x seed."""

    workers: list[int]
    effective_batches: list[int]
    aggregators: list[str]
    seeds: list[int]
    dimension: int
    iterations: int
    beta: float
    step_rule: str
    step_size: float | None
    ablation: bool
    record_coefficient_stats: bool
    output_dir: Path
    csv_path: Path | None
    bytes_per_element: int
    worker_mode: str

    def cells(self):
        return product(self.workers, self.effective_batches, self.aggregators, self.seeds)

    @property
    def cell_count(self) -> int:
        return len(self.workers) * len(self.effective_batches) * len(self.aggregators) * len(self.seeds)


def parse_config(argv=None) -> ExperimentMatrix:
    """Resolve flags plus optional config file into an ExperimentMatrix.

    Precedence: explicit flag > config file entry > built-in default.
    """
    namespace = _build_parser().parse_args(argv)
    file_values = _read_config_file(namespace.config) if namespace.config else {}

    def pick(key: str) -> str | None:
        flag = getattr(namespace, key.replace("-", "_"))
        if flag is not None:
            return flag
        if key in file_values:
            return file_values[key]
        return DEFAULTS.get(key)

    workers = _parse_int_list(pick("workers"), "workers")
    effective_batches = _parse_int_list(pick("effective-batch"), "effective-batch")
    for n in workers:
        for eb in effective_batches:
            if eb % n != 0:
                raise UsageError(f"effective-batch: {eb} is not divisible by workers {n}")

    if namespace.seed is not None and namespace.seeds is not None:
        raise UsageError("seeds: pass either --seed or --seeds, not both")
    if "seed" in file_values and "seeds" in file_values:
        raise UsageError("seeds: config file sets both seed and seeds")
    seed_text = namespace.seeds or namespace.seed or file_values.get("seeds") or file_values.get("seed")
    seeds = _parse_seeds(seed_text if seed_text is not None else DEFAULTS["seeds"])

    aggregators = []
    for token in pick("aggregator").split(","):
        token = token.strip()
        if token not in AGGREGATOR_TOKENS:
            raise UsageError(f"aggregator: unknown name {token!r}")
        if token not in aggregators:
            aggregators.append(token)

    try:
        beta = float(pick("beta"))
    except ValueError:
        raise UsageError(f"beta: expected a float, got {pick('beta')!r}") from None
    if not 0.0 < beta < 1.0:
        raise UsageError(f"beta: must be in (0,1), got {beta}")

    step_rule = pick("step-rule")
    if step_rule not in ("exact_line_search", "fixed"):
        raise UsageError(f"step-rule: unknown rule {step_rule!r}")
    step_size_text = pick("step-size")
    step_size = None
    if step_size_text is not None:
        try:
            step_size = float(step_size_text)
        except ValueError:
            raise UsageError(f"step-size: expected a float, got {step_size_text!r}") from None
        if step_size <= 0:
            raise UsageError(f"step-size: must be positive, got {step_size}")
    if step_rule == "fixed" and step_size is None:
        raise UsageError("step-size: required when step-rule is fixed")

    worker_mode = pick("worker-mode")
    if worker_mode not in ("sequential", "threads"):
        raise UsageError(f"worker-mode: unknown mode {worker_mode!r}")

    ablation = namespace.ablation or _parse_bool(file_values.get("ablation", "false"), "ablation")
    record_stats = namespace.record_coefficient_stats or _parse_bool(
        file_values.get("record-coefficient-stats", "false"), "record-coefficient-stats"
    )

    output_dir = pick("output-dir") or os.environ.get(OUTPUT_DIR_ENV) or "results"
    csv_text = pick("csv")
    csv_path = Path(csv_text) if csv_text is not None else None

    matrix = ExperimentMatrix(
        workers=workers,
        effective_batches=effective_batches,
        aggregators=aggregators,
        seeds=seeds,
        dimension=_parse_int(pick("dim"), "dim"),
        iterations=_parse_int(pick("iters"), "iters"),
        beta=beta,
        step_rule=step_rule,
        step_size=step_size,
        ablation=ablation,
        record_coefficient_stats=record_stats,
        output_dir=Path(output_dir),
        csv_path=csv_path,
        bytes_per_element=_parse_int(pick("bytes-per-element"), "bytes-per-element"),
        worker_mode=worker_mode,
    )
    if csv_path is not None and (matrix.cell_count != 1 or ablation):
        raise UsageError("csv: requires a single-run matrix (one value per axis, no ablation)")
    return matrix


def write_trace_csv(trace: TrainTrace, path: Path) -> None:
    # repr round-trips float64 exactly, so reruns rewrite files byte-identically
    # in every column except wall_time_s.
    lines = [CSV_HEADER]
    for r in trace.records:
        lines.append(
            ",".join(
                (
                    str(r.iteration),
                    repr(r.objective),
                    repr(r.coeff_mean_raw),
                    repr(r.coeff_std_raw),
                    repr(r.coeff_mean_smoothed),
                    repr(r.coeff_std_smoothed),
                    repr(r.coeff_mean_norm),
                    repr(r.coeff_std_norm),
                    repr(r.lam),
                    str(int(r.fallback)),
                    str(r.allreduce_elems),
                    str(r.allgather_elems),
                    repr(r.wall_time_s),
                )
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def _trace_name(token: str, n: int, eb: int, seed: int) -> str:
    return f"{token}_w{n}_ebs{eb}_seed{seed}.csv"


def _run_config(matrix: ExperimentMatrix, n: int, eb: int, token: str, seed: int) -> RunConfig:
    engine_aggregator, switches = AGGREGATOR_TOKENS[token]
    return RunConfig.from_effective_batch(
        n,
        eb,
        iterations=matrix.iterations,
        aggregator=engine_aggregator,
        adacons=AdaConsConfig(beta=matrix.beta, **switches),
        step_rule=matrix.step_rule,
        step_size=matrix.step_size,
        seed=seed,
        record_coefficient_stats=matrix.record_coefficient_stats,
        worker_mode=matrix.worker_mode,
    )


def _summary_row(token: str, n: int, eb: int, seed: int, trace: TrainTrace, bytes_per_element: int) -> dict:
    walls = [r.wall_time_s for r in trace.records]
    elements = sum(r.allreduce_elems + r.allgather_elems for r in trace.records)
    return {
        "aggregator": token,
        "workers": n,
        "effective_batch": eb,
        "seed": seed,
        "final_objective": trace.final_objective,
        "mean_iter_wall_s": statistics.fmean(walls),
        "comm_elements": elements,
        "comm_bytes": elements * bytes_per_element,
        "fallback_count": trace.fallback_count,
    }


SUMMARY_HEADER = (
    "aggregator,workers,effective_batch,seed,final_objective,"
    "mean_iter_wall_s,comm_elements,comm_bytes,fallback_count"
)


def _write_summary(path: Path, rows: list[dict]) -> None:
    lines = [SUMMARY_HEADER]
    for row in rows:
        lines.append(
            ",".join(
                (
                    row["aggregator"],
                    str(row["workers"]),
                    str(row["effective_batch"]),
                    str(row["seed"]),
                    repr(row["final_objective"]),
                    repr(row["mean_iter_wall_s"]),
                    str(row["comm_elements"]),
                    str(row["comm_bytes"]),
                    str(row["fallback_count"]),
                )
            )
        )
    path.write_text("\n".join(lines) + "\n")


def _print_comparison(rows: list[dict]) -> None:
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((row["workers"], row["effective_batch"], row["aggregator"]), []).append(row)
    print(
        f"{'workers':>7} {'eff_batch':>9} {'aggregator':>22} {'runs':>4} "
        f"{'median_final_obj':>18} {'median_iter_s':>14}"
    )
    medians: dict[tuple, tuple[float, float]] = {}
    for key in sorted(groups):
        cell_rows = groups[key]
        objective = statistics.median(r["final_objective"] for r in cell_rows)
        wall = statistics.median(r["mean_iter_wall_s"] for r in cell_rows)
        medians[key] = (objective, wall)
        print(f"{key[0]:>7} {key[1]:>9} {key[2]:>22} {len(cell_rows):>4} {objective:>18.6e} {wall:>14.6e}")
    for n, eb in sorted({(n, eb) for n, eb, _ in medians}):
        baseline = next(
            (medians[(n, eb, t)] for t in ("sum", "average") if (n, eb, t) in medians), None
        )
        consensus = medians.get((n, eb, "adacons"))
        if baseline and consensus and baseline[1] > 0:
            ratio = consensus[1] / baseline[1]
            print(f"wall-time ratio adacons/averaging at workers={n} eff_batch={eb}: {ratio:.3f}")


def run_matrix(matrix: ExperimentMatrix) -> int:
    """Execute every cell, write per-cell trace CSVs plus summary.csv."""
    single_csv = matrix.csv_path is not None
    if not single_csv:
        matrix.output_dir.mkdir(parents=True, exist_ok=True)
    summary_rows: list[dict] = []
    if matrix.ablation:
        for n, eb, seed in product(matrix.workers, matrix.effective_batches, matrix.seeds):
            base = _run_config(matrix, n, eb, "adacons", seed)
            spec = ProblemSpec(dimension=matrix.dimension, seed=seed)
            for variant, trace in run_ablation_matrix(base, spec).items():
                token = ABLATION_LABELS[variant]
                write_trace_csv(trace, matrix.output_dir / _trace_name(token, n, eb, seed))
                summary_rows.append(_summary_row(token, n, eb, seed, trace, matrix.bytes_per_element))
    else:
        for n, eb, token, seed in matrix.cells():
            trace = run(_run_config(matrix, n, eb, token, seed), ProblemSpec(dimension=matrix.dimension, seed=seed))
            if single_csv:
                write_trace_csv(trace, matrix.csv_path)
                print(
                    f"{token} workers={n} eff_batch={eb} seed={seed}: "
                    f"final objective {trace.final_objective!r} -> {matrix.csv_path}"
                )
                return 0
            write_trace_csv(trace, matrix.output_dir / _trace_name(token, n, eb, seed))
            summary_rows.append(_summary_row(token, n, eb, seed, trace, matrix.bytes_per_element))
    _write_summary(matrix.output_dir / "summary.csv", summary_rows)
    _print_comparison(summary_rows)
    return 0


def main(argv=None) -> int:
    try:
        matrix = parse_config(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    try:
        return run_matrix(matrix)
    except TrainingAborted as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return 2


def console_entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    console_entry()
