"""Run the canonical linear-regression comparison sweep.

Five seeds per cell over workers x effective batch x aggregator, writing one
trace CSV per run plus summary.csv into the output directory (default
``results``, override with --output-dir or ADACONS_OUTPUT_DIR).  Takes a few
minutes; pass extra CLI flags to shrink it, e.g. --iters 50 --seeds 1..2.
"""

import sys

from adacons.cli import main

CANONICAL = [
    "--workers", "8,32",
    "--effective-batch", "64,1024",
    "--aggregator", "sum,adacons",
    "--seeds", "1..5",
    "--dim", "1000",
    "--iters", "500",
]

if __name__ == "__main__":
    raise SystemExit(main(CANONICAL + sys.argv[1:]))
