"""Two-task representation drift: per-seed AUC drift for each policy and the mean curves.

Runs the same protocol as `rehearse drift`, but also prints per-seed beta values
so the direction of the effect can be read seed by seed.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from rehearse.cli import main as cli_main
from rehearse.config import load_config
from rehearse.engine import run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-c", "--config", default=str(ROOT / "configs" / "drift.ini"))
    ap.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9")
    ap.add_argument("--policies", default="grasp,uniform_balanced")
    ap.add_argument("-o", "--output", default="drift_out", help="directory for the curve files and table")
    args = ap.parse_args(argv)

    cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    policies = args.policies.split(",")
    beta = {}
    for p in policies:
        beta[p] = np.array([
            [r.drift_auc for r in run_experiment(cfg.replace(**{"policy.kind": p}).with_seed(s)).reports] for s in seeds
        ])
        print(f"{p:17s} beta task1 {beta[p][:, 0].mean():.3f}  task2 {beta[p][:, 1].mean():.3f}")
    if "grasp" in beta and "uniform_balanced" in beta:
        lower = (beta["grasp"] < beta["uniform_balanced"]).sum(0)
        print(f"seeds where GRASP drifts less: task1 {lower[0]}/{len(seeds)}, task2 {lower[1]}/{len(seeds)}")
    # mean curve files and the beta/phi table via the CLI
    return cli_main(["drift", "-c", args.config, "-o", args.output, "--seeds", args.seeds, "--policies", args.policies])


if __name__ == "__main__":
    sys.exit(main())
