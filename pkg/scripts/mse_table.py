"""Q-estimate error of fixed vs adaptive aggregation on S=250 GARNETs, one run per epsilon.

    python3 scripts/mse_table.py [--iterations N] [--trials N] [--out DIR]
"""
import argparse
import tempfile
from pathlib import Path

import yaml

from pasa.cli import main

p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
p.add_argument("--iterations", type=int, default=20_000_000)
p.add_argument("--trials", type=int, default=20)
p.add_argument("--out", default="results/mse")
args = p.parse_args()

for eps in (0.01, 0.001):
    with tempfile.NamedTemporaryFile("w", suffix=".yaml", delete=False) as fh:
        yaml.safe_dump({"environment": {"S": 250, "zeta": 30}, "sarsa": {"epsilon": eps}}, fh)
    code = main(["garnet-mse", "--config", fh.name, "--trials", str(args.trials),
                 "--iterations", str(args.iterations), "--out", str(Path(args.out) / f"eps{eps}")])
    Path(fh.name).unlink()
    if code:
        raise SystemExit(code)
