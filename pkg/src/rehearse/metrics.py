"""Accuracy summaries, drift AUC and McNemar's paired test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True)
class MetricSummary:
    mu_new: float
    mu_old: float
    mu_all: float
    alpha: float
    T: int


@dataclass(frozen=True)
class DriftSummary:
    auc: float  # beta
    mean: float  # phi


def summarize(reports) -> MetricSummary:
    """Session-averaged accuracies; sessions with no old (or new) classes are skipped for that mean."""
    reports = list(reports)
    if not reports:
        raise InvalidArgument("need at least one session report")
    alphas = [r.acc_all for r in reports]
    return MetricSummary(
        mu_new=_nanmean([r.acc_new for r in reports]),
        mu_old=_nanmean([r.acc_old for r in reports]),
        mu_all=float(np.mean(alphas)),
        alpha=float(alphas[-1]),
        T=len(reports),
    )


def _nanmean(values):
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def trapezoid_auc(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise InvalidArgument("xs and ys must be 1-D of equal length >= 2")
    if np.any(np.diff(xs) <= 0):
        raise InvalidArgument("xs must be strictly increasing")
    return float(np.sum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs)))


def drift_summary(curve) -> DriftSummary:
    """beta = trapezoidal AUC over unit-spaced iteration index, phi = mean."""
    curve = np.asarray(curve, dtype=np.float64)
    if len(curve) == 0:
        raise InvalidArgument("empty drift curve")
    auc = trapezoid_auc(np.arange(len(curve)), curve) if len(curve) >= 2 else 0.0
    return DriftSummary(auc=auc, mean=float(curve.mean()))


def chi2_sf_1df(x) -> float:
    # P(chi2_1 > x) = P(|N(0,1)| > sqrt(x)) = erfc(sqrt(x/2))
    if x <= 0:
        return 1.0
    return math.erfc(math.sqrt(x / 2.0))


@dataclass(frozen=True)
class McNemarResult:
    statistic: float
    p_value: float
    b: int
    c: int


def mcnemar(preds_a, preds_b, truth) -> McNemarResult:
    """Continuity-corrected McNemar test on paired predictions.

    b counts samples A got right and B got wrong; c the reverse.
    """
    a = np.asarray(preds_a)
    bb = np.asarray(preds_b)
    y = np.asarray(truth)
    if not (a.shape == bb.shape == y.shape) or a.ndim != 1:
        raise InvalidArgument("prediction and truth vectors must have equal length")
    if len(y) == 0:
        raise InvalidArgument("need at least one paired prediction")
    ok_a, ok_b = a == y, bb == y
    b = int(np.sum(ok_a & ~ok_b))
    c = int(np.sum(~ok_a & ok_b))
    return mcnemar_from_counts(b, c)


def mcnemar_from_counts(b, c) -> McNemarResult:
    if b + c == 0:
        return McNemarResult(0.0, 1.0, b, c)
    stat = (abs(b - c) - 1) ** 2 / (b + c)
    return McNemarResult(float(stat), chi2_sf_1df(stat), b, c)
