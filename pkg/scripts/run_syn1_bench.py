#!/usr/bin/env python3
"""Benchmark the scalar arctan-channel dataset (kalman vs the GP variants).

Equivalent to:
    dkf bench --dataset syn1 --T 10000 --m 5 --trials 5 \
        --filters kalman,dkf-gp,dkf-gp-freq --seed 0

Extra arguments are forwarded, so e.g. `--T 2000 --format csv` works.
"""

import sys

from dkf.cli import main

DEFAULTS = [
    "bench",
    "--dataset", "syn1",
    "--T", "10000",
    "--m", "5",
    "--trials", "5",
    "--filters", "kalman,dkf-gp,dkf-gp-freq",
    "--seed", "0",
]

if __name__ == "__main__":
    sys.exit(main(DEFAULTS + sys.argv[1:]))
