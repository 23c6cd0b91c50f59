#!/usr/bin/env python3
"""Benchmark the magnitude/sign dataset (classic baselines vs dkf-nn).

Equivalent to:
    dkf bench --dataset syn2 --T 2000 --trials 5 \
        --filters kalman,ekf,ukf,dkf-nn --seed 0

Extra arguments are forwarded, so e.g. `--seed 3 --format csv` works.
"""

import sys

from dkf.cli import main

DEFAULTS = [
    "bench",
    "--dataset", "syn2",
    "--T", "2000",
    "--trials", "5",
    "--filters", "kalman,ekf,ukf,dkf-nn",
    "--seed", "0",
]

if __name__ == "__main__":
    sys.exit(main(DEFAULTS + sys.argv[1:]))
