"""Rehearsal policies: which buffered samples feed the U = n*b gradient updates.

Every policy returns a SelectionPlan of exactly U sample references and
treats the buffer and model as read-only.
"""

from __future__ import annotations

import bisect
import enum
import itertools
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import model_head as mh
from .errors import InvalidArgument, InvalidState
from .quantizer import kmeans

DIST_EPS = 1e-8


class PolicyKind(str, enum.Enum):
    GRASP = "grasp"
    UNIFORM = "uniform"
    UNIFORM_BALANCED = "uniform_balanced"
    MIN_REHEARSAL = "min_rehearsal"
    MAX_LOSS = "max_loss"
    MIN_MARGIN = "min_margin"
    MIN_LOGIT_DIST = "min_logit_dist"
    MIN_CONFIDENCE = "min_confidence"
    KMEANS = "kmeans"
    MOF = "mof"
    HARD_BIASED = "hard_biased"
    MIR = "mir"


SCORED_KINDS = frozenset({
    PolicyKind.MIN_REHEARSAL,
    PolicyKind.MAX_LOSS,
    PolicyKind.MIN_MARGIN,
    PolicyKind.MIN_LOGIT_DIST,
    PolicyKind.MIN_CONFIDENCE,
    PolicyKind.KMEANS,
    PolicyKind.MOF,
    PolicyKind.HARD_BIASED,
})


class GraspMode(str, enum.Enum):
    STOCHASTIC = "stochastic"
    DETERMINISTIC = "deterministic"


@dataclass
class SelectionPlan:
    sample_ids: np.ndarray
    class_ids: np.ndarray
    policy: str
    seed: object = None

    def __len__(self):
        return len(self.sample_ids)

    @property
    def class_counts(self) -> dict:
        return dict(sorted(Counter(int(c) for c in self.class_ids).items()))

    def to_lines(self) -> list[str]:
        return [f"{int(k)},{int(s)},{i}" for i, (s, k) in enumerate(zip(self.sample_ids, self.class_ids))]

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("class_id,sample_id,position\n")
            for line in self.to_lines():
                fh.write(line + "\n")


@dataclass
class PolicyContext:
    model: mh.ClassifierHead | None = None
    decoder: object = None  # PQModel when the buffer holds codes
    new_batch: tuple | None = None  # (X, y) for MIR
    kmeans_k: int | None = None
    kmeans_iters: int = 20
    mir_virtual_lr: float = 0.1
    mir_candidate_size: int | None = None
    grasp_mode: GraspMode = GraspMode.STOCHASTIC
    extra: dict = field(default_factory=dict)


def _empty_plan(name, seed=None):
    return SelectionPlan(np.empty(0, np.int64), np.empty(0, np.int64), name, seed)


def _class_groups(buffer):
    """{class id: (sample ids sorted ascending, cached distances)} as lists, nonempty classes only."""
    groups = {}
    for k in buffer.class_ids():
        members = sorted(buffer.classes[k], key=lambda s: s.sample_id)
        groups[k] = ([s.sample_id for s in members], [s.distance for s in members])
    return groups


def _finish(picks, name, seed, U):
    ids = np.array([p[0] for p in picks], dtype=np.int64)
    cls = np.array([p[1] for p in picks], dtype=np.int64)
    if len(ids) != U:
        raise InvalidState(f"{name} produced {len(ids)} selections, expected {U}")
    return SelectionPlan(ids, cls, name, seed)


def _round_robin(streams, U):
    """Cycle ascending class ids, pulling one pick per class, stop at exactly U."""
    picks = []
    keys = sorted(streams)
    while len(picks) < U:
        for k in keys:
            picks.append((next(streams[k]), k))
            if len(picks) >= U:
                break
    return picks


# --- GRASP -----------------------------------------------------------------


def grasp_select(buffer, U, rng, mode=GraspMode.STOCHASTIC) -> SelectionPlan:
    """Prototype-first curriculum with class-balanced round robin.

    Per class, pick with probability proportional to 1/(D + eps) (or the
    argmin in DETERMINISTIC mode), then add max(D) to the pick's working
    distance so it drops to the back. The cached distances are not touched.
    """
    mode = GraspMode(mode)
    if U == 0:
        return _empty_plan("grasp")
    if len(buffer) == 0:
        raise InvalidState("empty buffer")
    groups = _class_groups(buffer)
    for k, (_, d) in groups.items():
        if not all(math.isfinite(x) for x in d):
            raise InvalidState(f"class {k} has no cached distances; refresh first")

    # round robin fixes each class's pick count up front: the first U mod K classes get one extra
    keys = sorted(groups)
    base, extra = divmod(U, len(keys))
    per_class = {
        k: _grasp_class(*groups[k], base + (i < extra), rng, mode) for i, k in enumerate(keys)
    }
    picks = [(per_class[k][r], k) for r in range(base + 1) for k in keys if r < len(per_class[k])]
    return _finish(picks, "grasp", None, U)


def _grasp_class(ids, cached, count, rng, mode, small=32):
    """One class's GRASP picks; lists beat numpy call overhead on small classes."""
    draws = rng.random(count).tolist() if mode is GraspMode.STOCHASTIC else None
    if len(cached) <= small:
        return _grasp_class_lists(list(ids), list(cached), draws, count)
    work = np.array(cached, dtype=np.float64)
    last = len(work) - 1
    out = []
    for j in range(count):
        if draws is None:
            m = int(work.argmin())
        else:
            cdf = np.cumsum(1.0 / (work + DIST_EPS))
            m = min(int(cdf.searchsorted(draws[j] * cdf[-1], side="right")), last)
        bump = work.max()
        # all-zero distances would leave the pick in place; any positive bump works
        work[m] += bump if bump > 0 else 1.0
        out.append(int(ids[m]))
    return out


def _grasp_class_lists(ids, work, draws, count):
    # same arithmetic as the array path: sequential cumsum, right-sided search
    last = len(work) - 1
    out = []
    for j in range(count):
        if draws is None:
            m = work.index(min(work))
        else:
            cdf = list(itertools.accumulate(1.0 / (x + DIST_EPS) for x in work))
            m = min(bisect.bisect_right(cdf, draws[j] * cdf[-1]), last)
        bump = max(work)
        work[m] += bump if bump > 0 else 1.0
        out.append(ids[m])
    return out


# --- uniform baselines -----------------------------------------------------


def uniform_select(buffer, U, rng) -> SelectionPlan:
    if U == 0:
        return _empty_plan("uniform")
    if len(buffer) == 0:
        raise InvalidState("empty buffer")
    items = [(s.sample_id, s.label) for s in buffer.samples()]
    idx = rng.integers(len(items), size=U)
    return _finish([items[i] for i in idx], "uniform", None, U)


def _shuffled_cycle(ids, rng):
    while True:
        for i in rng.permutation(len(ids)):
            yield int(ids[i])


def uniform_balanced_select(buffer, U, rng) -> SelectionPlan:
    if U == 0:
        return _empty_plan("uniform_balanced")
    if len(buffer) == 0:
        raise InvalidState("empty buffer")
    groups = _class_groups(buffer)
    streams = {k: _shuffled_cycle(ids, rng) for k, (ids, _) in groups.items()}
    return _finish(_round_robin(streams, U), "uniform_balanced", None, U)


# --- scored baselines ------------------------------------------------------


def _sorted_cycle(ids, scores, rng):
    # descending score; ties re-broken by fresh random keys on every pass
    while True:
        order = np.lexsort((rng.random(len(ids)), -scores))
        for i in order:
            yield int(ids[i])


def balanced_select_by_score(sample_ids, class_ids, scores, U, rng, name="scored") -> SelectionPlan:
    """Class-balanced round robin; within a class, highest score first, then wrap."""
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if not (len(sample_ids) == len(class_ids) == len(scores)):
        raise InvalidArgument("scores must cover every sample")
    if U == 0:
        return _empty_plan(name)
    if len(sample_ids) == 0:
        raise InvalidState("empty buffer")
    if not np.all(np.isfinite(scores)):
        raise InvalidArgument("scores must be finite")
    streams = {}
    for k in np.unique(class_ids):
        mask = class_ids == k
        streams[int(k)] = _sorted_cycle(sample_ids[mask], scores[mask], rng)
    return _finish(_round_robin(streams, U), name, None, U)


def _model_outputs(buffer, ctx, samples):
    if ctx.model is None:
        raise InvalidArgument("this policy needs a model snapshot")
    X = buffer.payloads(samples, ctx.decoder)
    y = np.array([s.label for s in samples], dtype=np.int64)
    logits, z = mh.forward(ctx.model, X)
    return logits, z, y


def score_samples(kind, buffer, ctx: PolicyContext, rng=None) -> np.ndarray:
    """Priority per stored sample in buffer.samples() order; higher goes first."""
    try:
        kind = PolicyKind(kind)
    except ValueError:
        raise InvalidArgument(f"unknown policy kind {kind!r}") from None
    if kind not in SCORED_KINDS:
        raise InvalidArgument(f"{kind.value} is not a score-based policy")
    samples = list(buffer.samples())
    if not samples:
        return np.empty(0)

    if kind is PolicyKind.MIN_REHEARSAL:
        return -np.array([s.rehearsal_count for s in samples], dtype=np.float64)
    if kind in (PolicyKind.MOF, PolicyKind.HARD_BIASED):
        d = np.array([s.distance for s in samples], dtype=np.float64)
        if not all(math.isfinite(x) for x in d):
            raise InvalidState("distances not cached; refresh first")
        return -d if kind is PolicyKind.MOF else d

    logits, z, y = _model_outputs(buffer, ctx, samples)
    rows = np.arange(len(y))
    if kind is PolicyKind.MAX_LOSS:
        return -mh.log_softmax(logits)[rows, y]
    if kind is PolicyKind.KMEANS:
        k = ctx.kmeans_k or len(buffer.class_ids())
        k = min(k, len(samples))
        if rng is None:
            raise InvalidArgument("KMEANS needs an rng")
        res = kmeans(z, k, ctx.kmeans_iters, rng)
        d2 = ((z[:, None, :] - res.centers[None, :, :]) ** 2).sum(-1)
        return -np.sqrt(d2.min(axis=1))
    if kind is PolicyKind.MIN_LOGIT_DIST:
        top2 = np.sort(logits, axis=1)[:, -2:]
        return -(top2[:, 1] - top2[:, 0])
    p = mh.softmax(logits)
    p_true = p[rows, y]
    if kind is PolicyKind.MIN_CONFIDENCE:
        return -p_true
    # MIN_MARGIN
    others = p.copy()
    others[rows, y] = -np.inf
    return -(p_true - others.max(axis=1))


def scored_select(kind, buffer, U, ctx, rng) -> SelectionPlan:
    samples = list(buffer.samples())
    scores = score_samples(kind, buffer, ctx, rng)
    ids = [s.sample_id for s in samples]
    cls = [s.label for s in samples]
    return balanced_select_by_score(ids, cls, scores, U, rng, name=PolicyKind(kind).value)


# --- MIR -------------------------------------------------------------------


def mir_select(buffer, ctx: PolicyContext, U, rng, virtual_lr=None, candidate_size=None) -> SelectionPlan:
    """Maximally interfered retrieval via one virtual SGD step on a model clone."""
    if ctx.new_batch is None or len(ctx.new_batch[1]) == 0:
        raise InvalidArgument("MIR needs a nonempty new-session batch")
    if ctx.model is None:
        raise InvalidArgument("MIR needs a model snapshot")
    if U == 0:
        return _empty_plan("mir")
    samples = list(buffer.samples())
    if not samples:
        raise InvalidState("empty buffer")
    lr = ctx.mir_virtual_lr if virtual_lr is None else virtual_lr
    size = candidate_size or ctx.mir_candidate_size or len(samples)
    size = min(size, len(samples))
    pick = np.sort(rng.choice(len(samples), size=size, replace=False))
    cands = [samples[i] for i in pick]
    X = buffer.payloads(cands, ctx.decoder)
    y = np.array([s.label for s in cands], dtype=np.int64)

    before = mh.per_sample_loss(ctx.model, X, y)
    virtual = ctx.model.copy()
    _, grads, _ = mh.loss_and_grads(virtual, *ctx.new_batch)
    for name, g in grads.items():
        virtual.params[name] -= lr * g
    after = mh.per_sample_loss(virtual, X, y)
    scores = after - before
    return balanced_select_by_score([s.sample_id for s in cands], y, scores, U, rng, name="mir")


# --- dispatch --------------------------------------------------------------


def select(kind, buffer, U, ctx: PolicyContext, rng) -> SelectionPlan:
    try:
        kind = PolicyKind(kind)
    except ValueError:
        raise InvalidArgument(f"unknown policy kind {kind!r}") from None
    if kind is PolicyKind.GRASP:
        return grasp_select(buffer, U, rng, ctx.grasp_mode)
    if kind is PolicyKind.UNIFORM:
        return uniform_select(buffer, U, rng)
    if kind is PolicyKind.UNIFORM_BALANCED:
        return uniform_balanced_select(buffer, U, rng)
    if kind is PolicyKind.MIR:
        return mir_select(buffer, ctx, U, rng)
    return scored_select(kind, buffer, U, ctx, rng)
