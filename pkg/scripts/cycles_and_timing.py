"""Cycle statistics of random maps and per-iteration cost at S=8000.

    python3 scripts/cycles_and_timing.py [--out DIR]
"""
import argparse
from pathlib import Path

from pasa.cli import main

p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
p.add_argument("--out", default="results")
args = p.parse_args()

for argv in (["cycle-stats", "--states", "10000", "--samples", "10000"],
             ["timing", "--states", "8000", "--iterations", "10000000", "--repeats", "5"]):
    code = main([*argv, "--out", str(Path(args.out) / argv[0])])
    if code:
        raise SystemExit(code)
