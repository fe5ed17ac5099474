"""Print how the consensus coefficients evolve over one training run.

Runs the full pipeline (momentum + normalization) with per-iteration
coefficient statistics enabled and tabulates raw / smoothed / normalized
means and spreads at a few checkpoints, plus the fallback count.
"""

import argparse

from adacons.engine import RunConfig, run
from adacons.problems import ProblemSpec


def parse_args():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workers", type=int, default=32)
    parser.add_argument("--effective-batch", type=int, default=1024)
    parser.add_argument("--dim", type=int, default=1000)
    parser.add_argument("--iters", type=int, default=500)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--beta", type=float, default=0.99)
    parser.add_argument("--checkpoints", type=int, default=10)
    return parser.parse_args()


def main():
    args = parse_args()
    config = RunConfig.from_effective_batch(
        args.workers,
        args.effective_batch,
        iterations=args.iters,
        aggregator="adacons",
        seed=args.seed,
        record_coefficient_stats=True,
    )
    config.adacons.beta = args.beta
    spec = ProblemSpec(dimension=args.dim, seed=args.seed)
    trace = run(config, spec)

    print(
        f"workers={args.workers} eff_batch={args.effective_batch} dim={args.dim} "
        f"iters={args.iters} seed={args.seed} beta={args.beta}"
    )
    print(f"initial objective {trace.initial_objective:.6e}, final {trace.final_objective:.6e}")
    print(
        f"{'iter':>6} {'objective':>13} {'raw_mean':>11} {'raw_std':>11} "
        f"{'smooth_mean':>12} {'smooth_std':>11} {'norm_mean':>11} {'norm_std':>11} {'lambda':>11}"
    )
    step = max(1, args.iters // args.checkpoints)
    for record in trace.records:
        if record.iteration % step != 0 and record.iteration != args.iters:
            continue
        print(
            f"{record.iteration:>6} {record.objective:>13.6e} "
            f"{record.coeff_mean_raw:>11.4e} {record.coeff_std_raw:>11.4e} "
            f"{record.coeff_mean_smoothed:>12.4e} {record.coeff_std_smoothed:>11.4e} "
            f"{record.coeff_mean_norm:>11.4e} {record.coeff_std_norm:>11.4e} "
            f"{record.lam:>11.4e}"
        )
    print(f"fallback rounds: {trace.fallback_count} of {args.iters}")


if __name__ == "__main__":
    main()
