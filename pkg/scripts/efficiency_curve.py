"""Final alpha against rehearsal budget for GRASP and uniform balanced.

The budget is varied through the mini-batch size n at a fixed iteration count b,
so the learning-rate schedule is identical at every point. For each seed the
script also reports the smallest budget fraction at which GRASP matches the
baseline's final alpha at the full budget.
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from rehearse.config import load_config
from rehearse.engine import run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-c", "--config", default=str(ROOT / "configs" / "benchmark.ini"))
    ap.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9")
    ap.add_argument("--fractions", default="0.25,0.5,0.6,0.7,0.8,0.9,1.0,1.5,2.0")
    ap.add_argument("-o", "--output", default="efficiency_curve.csv")
    args = ap.parse_args(argv)

    cfg = load_config(args.config)
    n_full = cfg.rehearsal.batch_size
    seeds = [int(s) for s in args.seeds.split(",")]
    fracs = sorted(float(f) for f in args.fractions.split(","))
    alpha = {}
    for policy in ("grasp", "uniform_balanced"):
        for f in fracs:
            n = max(1, int(round(f * n_full)))
            for s in seeds:
                c = cfg.replace(**{"policy.kind": policy, "rehearsal.batch_size": n}).with_seed(s)
                alpha[(policy, f, s)] = run_experiment(c).summary.alpha

    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "fraction", "updates_per_session", "alpha_mean", "alpha_std"])
        for policy in ("grasp", "uniform_balanced"):
            for f in fracs:
                a = np.array([alpha[(policy, f, s)] for s in seeds])
                n = max(1, int(round(f * n_full)))
                w.writerow([policy, f, n * cfg.rehearsal.iterations, f"{a.mean():.5f}", f"{a.std():.5f}"])
                print(f"{policy:17s} x{f:<4}  alpha {100 * a.mean():.2f} +- {100 * a.std():.2f}")

    if 1.0 in fracs:
        first = []
        for s in seeds:
            target = alpha[("uniform_balanced", 1.0, s)]
            hit = next((f for f in fracs if alpha[("grasp", f, s)] >= target), None)
            first.append(hit)
        print("GRASP budget fraction matching the baseline, per seed:", first)
    return 0


if __name__ == "__main__":
    sys.exit(main())
