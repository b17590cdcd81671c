"""Reward curves on the teleporting gridworld and the logistics problem.

    python3 scripts/curves.py [--iterations N] [--trials N] [--out DIR]
"""
import argparse
from pathlib import Path

from pasa.cli import main

p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
p.add_argument("--iterations", type=int, default=20_000_000)
p.add_argument("--trials", type=int, default=10)
p.add_argument("--out", default="results")
args = p.parse_args()

for cmd in ("gridworld", "logistics"):
    code = main([cmd, "--trials", str(args.trials), "--iterations", str(args.iterations),
                 "--out", str(Path(args.out) / cmd)])
    if code:
        raise SystemExit(code)
