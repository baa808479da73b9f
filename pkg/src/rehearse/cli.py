"""`rehearse` command line: run, compare and drift."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, serialize_config
from .engine import RESULT_COLUMNS, run_experiment
from .errors import NumericError, RehearseError
from .metrics import drift_summary, mcnemar
from .policies import PolicyKind

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
BASELINE = PolicyKind.UNIFORM_BALANCED.value
SUMMARY_COLUMNS = ("experiment_id", "policy", "seed", "T", "mu_new", "mu_old", "mu_all", "alpha", "total_steps", "schedule_hash")

log = logging.getLogger("rehearse")


class UsageError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("REHEARSE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _parse_list(text, cast=str):
    items = [t.strip() for t in text.split(",") if t.strip()]
    try:
        return [cast(t) for t in items]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def _fmt(x):
    return "nan" if x is None or np.isnan(x) else repr(float(x))


def _summary_row(res):
    s = res.summary
    return [res.experiment_id, res.policy, res.seed, s.T, _fmt(s.mu_new), _fmt(s.mu_old), _fmt(s.mu_all), _fmt(s.alpha), res.total_steps, res.schedule_hash]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[1:]


def _run_cell(args):
    cfg, path, exp_id = args
    return run_experiment(cfg, results_path=path, experiment_id=exp_id)


def _prepare(args):
    cfg = load_config(args.config)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _parse_list(args.seeds, int) if args.seeds else [cfg.data.seed]
    if not seeds:
        raise UsageError("need at least one seed")
    (out / "config.ini").write_text(serialize_config(cfg))
    return cfg, out, seeds


def cmd_run(args) -> int:
    cfg, out, seeds = _prepare(args)
    cells = out / "cells"
    cells.mkdir(exist_ok=True)
    rows, summaries = [], []
    for seed in seeds:
        c = cfg.with_seed(seed)
        exp_id = f"{c.policy.kind}-s{seed}"
        path = cells / f"{exp_id}.csv"
        res = run_experiment(c, results_path=path, experiment_id=exp_id)
        rows.extend(_read_rows(path))
        summaries.append(_summary_row(res))
    _write_csv(out / "results.csv", RESULT_COLUMNS, rows)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summaries)
    return EXIT_OK


def _grid(cfg, policies, seeds, cells, jobs):
    tasks = []
    for policy in policies:
        for seed in seeds:
            c = cfg.with_seed(seed).replace(**{"policy.kind": policy})
            c.validate()
            exp_id = f"{policy}-s{seed}"
            tasks.append((c, cells / f"{exp_id}.csv", exp_id))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    return {(r.policy, r.seed): r for r in results}


def cmd_compare(args) -> int:
    cfg, out, seeds = _prepare(args)
    policies = _parse_list(args.policies)
    for p in policies:
        try:
            PolicyKind(p)
        except ValueError:
            raise UsageError(f"unknown policy {p!r}") from None
    if len(set(policies)) < 2:
        raise UsageError("compare needs at least two distinct policies")
    if BASELINE not in policies:
        policies.append(BASELINE)
    cells = out / "cells"
    cells.mkdir(exist_ok=True)
    results = _grid(cfg, policies, seeds, cells, max(1, args.jobs))

    rows, summaries = [], []
    for p in policies:
        for s in seeds:
            res = results[(p, s)]
            rows.extend(_read_rows(cells / f"{res.experiment_id}.csv"))
            summaries.append(_summary_row(res))
    _write_csv(out / "results.csv", RESULT_COLUMNS, rows)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summaries)

    table = []
    for p in policies:
        mu = np.array([results[(p, s)].summary.mu_all for s in seeds])
        al = np.array([results[(p, s)].summary.alpha for s in seeds])
        if p == BASELINE:
            pval = ""
        else:
            # pool paired final predictions over seeds (each seed has its own test set)
            a = np.concatenate([results[(p, s)].final_predictions for s in seeds])
            b = np.concatenate([results[(BASELINE, s)].final_predictions for s in seeds])
            y = np.concatenate([results[(p, s)].final_labels for s in seeds])
            pval = _fmt(mcnemar(a, b, y).p_value)
        table.append([p, len(seeds), _fmt(mu.mean()), _fmt(mu.std()), _fmt(al.mean()), _fmt(al.std()), pval])
    _write_csv(
        out / "comparison.csv",
        ("policy", "seeds", "mu_all_mean", "mu_all_std", "alpha_mean", "alpha_std", "mcnemar_p_vs_uniform_balanced"),
        table,
    )
    return EXIT_OK


def cmd_drift(args) -> int:
    cfg, out, seeds = _prepare(args)
    if cfg.model.arch != "mlp1":
        raise ConfigError("drift needs arch = mlp1; a linear head has no sub-final layer", "model", "arch")
    if cfg.stream.num_sessions != 2:
        raise ConfigError("drift protocol needs exactly 2 tasks", "stream", "num_sessions")
    if cfg.drift.probe_size <= 0:
        cfg = cfg.replace(**{"drift.probe_size": 256})
    policies = _parse_list(args.policies)
    for p in policies:
        try:
            PolicyKind(p)
        except ValueError:
            raise UsageError(f"unknown policy {p!r}") from None
    cells = out / "cells"
    cells.mkdir(exist_ok=True)
    results = _grid(cfg, policies, seeds, cells, max(1, args.jobs))

    table = []
    for p in policies:
        row = [p]
        for task in (1, 2):
            curves = [results[(p, s)].reports[task - 1].drift_curve for s in seeds]
            if any(len(c) == 0 for c in curves):
                raise RehearseError(f"task {task} recorded no drift (no old classes to probe?)")
            mean_curve = np.mean(curves, axis=0)
            _write_csv(
                out / f"drift_{p}_task{task}.csv",
                ("iteration", "drift"),
                [[i, _fmt(v)] for i, v in enumerate(mean_curve)],
            )
            d = drift_summary(mean_curve)
            row += [_fmt(d.auc), _fmt(d.mean)]
        table.append(row)
    _write_csv(out / "drift_table.csv", ("policy", "beta_task1", "phi_task1", "beta_task2", "phi_task2"), table)
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="rehearse", description="Rehearsal-policy experiments for class-incremental learning.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", required=True, help="experiment config (INI)")
        p.add_argument("-o", "--output", required=True, help="output directory")
        p.add_argument("--seeds", default=None, help="comma-separated seeds (default: data.seed)")

    p = sub.add_parser("run", help="run one experiment per seed")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="policy x seed grid with a comparison table")
    common(p)
    p.add_argument("--policies", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("drift", help="two-task representation drift study")
    common(p)
    p.add_argument("--policies", default="grasp,uniform_balanced")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_drift)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, UsageError, FileNotFoundError) as exc:
        print(f"rehearse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"rehearse: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RehearseError as exc:
        print(f"rehearse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
