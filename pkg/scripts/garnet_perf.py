"""Final-window reward of fixed vs adaptive aggregation on GARNETs of several sizes.

    python3 scripts/garnet_perf.py [--sizes 250 2000 4000] [--iterations N] [--trials N] [--out DIR]
"""
import argparse
from pathlib import Path

from pasa.cli import main

p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
p.add_argument("--sizes", type=int, nargs="+", default=[250, 2000, 4000, 8000])
p.add_argument("--iterations", type=int, default=20_000_000)
p.add_argument("--trials", type=int, default=10)
p.add_argument("--out", default="results/garnet")
args = p.parse_args()

for S in args.sizes:
    code = main(["garnet-perf", "--states", str(S), "--trials", str(args.trials),
                 "--iterations", str(args.iterations), "--out", str(Path(args.out) / f"S{S}")])
    if code:
        raise SystemExit(code)
