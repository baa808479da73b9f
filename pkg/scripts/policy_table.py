"""Policy comparison on the synthetic benchmark: mean +- std of mu_A and final alpha.

    python3 scripts/policy_table.py --seeds 0-9 --policies grasp,uniform_balanced,max_loss
"""

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from rehearse.config import load_config
from rehearse.engine import run_experiment
from rehearse.metrics import mcnemar

ROOT = Path(__file__).resolve().parents[1]
BASELINE = "uniform_balanced"


def seed_range(text):
    if "-" in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def _cell(args):
    cfg, policy, seed = args
    res = run_experiment(cfg.replace(**{"policy.kind": policy}).with_seed(seed))
    return policy, seed, res.summary.mu_all, res.summary.alpha, res.final_predictions, res.final_labels


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-c", "--config", default=str(ROOT / "configs" / "benchmark.ini"))
    ap.add_argument("--policies", default="grasp,uniform_balanced,uniform,min_rehearsal,max_loss,min_margin,"
                    "min_logit_dist,min_confidence,kmeans,mof,hard_biased,mir")
    ap.add_argument("--seeds", default="0-9")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("-o", "--output", default=None, help="optional CSV path for the table")
    args = ap.parse_args(argv)

    cfg = load_config(args.config)
    policies = [p for p in args.policies.split(",") if p]
    if BASELINE not in policies:
        policies.append(BASELINE)
    seeds = seed_range(args.seeds)
    tasks = [(cfg, p, s) for p in policies for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            cells = list(ex.map(_cell, tasks))
    else:
        cells = [_cell(t) for t in tasks]
    by = {(p, s): c for p, s, *c in cells}

    header = ["policy", "mu_all", "mu_all_std", "alpha", "alpha_std", "wins_vs_baseline", "mcnemar_p"]
    rows = []
    base_alpha = np.array([by[(BASELINE, s)][1] for s in seeds])
    for p in policies:
        mu = np.array([by[(p, s)][0] for s in seeds])
        al = np.array([by[(p, s)][1] for s in seeds])
        if p == BASELINE:
            wins, pval = "", ""
        else:
            wins = f"{int(np.sum(al > base_alpha))}/{len(seeds)}"
            a = np.concatenate([by[(p, s)][2] for s in seeds])
            b = np.concatenate([by[(BASELINE, s)][2] for s in seeds])
            y = np.concatenate([by[(p, s)][3] for s in seeds])
            pval = f"{mcnemar(a, b, y).p_value:.3g}"
        rows.append([p, f"{100 * mu.mean():.2f}", f"{100 * mu.std():.2f}", f"{100 * al.mean():.2f}", f"{100 * al.std():.2f}", wins, pval])

    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    for r in [header, *rows]:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))
    if args.output:
        with open(args.output, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows([header, *rows])
    return 0


if __name__ == "__main__":
    sys.exit(main())
