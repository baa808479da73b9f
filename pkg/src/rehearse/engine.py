"""Offline continual-learning loop: acquire, refresh, select, rehearse, compress, evaluate."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import model_head as mh
from . import policies as pol
from . import quantizer as pq_mod
from .buffer import MemoryBuffer, PayloadKind, StoredSample
from .config import ExperimentConfig
from .errors import InvalidArgument, InvalidState, NumericError
from .metrics import MetricSummary, drift_summary, summarize
from .streams import Dataset, StreamSchedule, generate_synthetic, load_embedding_dataset, make_schedule

log = logging.getLogger(__name__)

RESULT_COLUMNS = (
    "experiment_id",
    "policy",
    "seed",
    "t",
    "alpha",
    "acc_new",
    "acc_old",
    "drift_beta",
    "drift_phi",
    "updates",
    "buffer_bytes",
    "schedule_hash",
)


@dataclass
class SessionReport:
    t: int
    acc_all: float
    acc_new: float
    acc_old: float
    drift_curve: np.ndarray
    drift_auc: float
    drift_mean: float
    selection_counts: dict
    updates: int  # cumulative rehearsal optimizer steps
    samples_used: int  # cumulative samples consumed by those steps
    buffer_bytes: int
    new_classes: tuple = ()
    old_classes: tuple = ()
    duration: float = 0.0


@dataclass
class ExperimentResult:
    experiment_id: str
    policy: str
    seed: int
    reports: list
    summary: MetricSummary
    final_predictions: np.ndarray
    final_labels: np.ndarray
    schedule_hash: str
    total_steps: int


def probe_drift(model_before, model_after, probe) -> float:
    """Mean L2 change of the penultimate embedding over the probe set."""
    probe = np.asarray(probe, dtype=np.float64)
    if probe.ndim != 2 or probe.shape[0] == 0:
        raise InvalidArgument("empty drift probe")
    delta = mh.embed(model_after, probe) - mh.embed(model_before, probe)
    return float(np.linalg.norm(delta, axis=1).mean())


def _rng(seed, *stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream]))


# named sub-streams so policies, eviction and data never share randomness
_EVICT, _PROBE, _INIT = 1, 2, 3


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.source == "synthetic":
        return generate_synthetic(d.num_classes, d.dim, d.per_class, d.separation, d.noise, d.seed)
    return load_embedding_dataset(d.source)


class Engine:
    """Mutable experiment state: model, optimizer, buffer, quantizer and RNG streams."""

    def __init__(self, cfg: ExperimentConfig, dataset: Dataset | None = None, schedule: StreamSchedule | None = None):
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset if dataset is not None else load_dataset(cfg)
        s = cfg.stream
        self.schedule = schedule if schedule is not None else make_schedule(
            self.dataset, s.mode, s.num_sessions, s.base_init_classes, s.tail_fraction, s.tail_keep, cfg.data.seed
        )
        m = cfg.model
        self.model = mh.init_head(m.arch, self.dataset.dim, self.dataset.num_classes, m.hidden_dim, seed=m.init_seed)
        self.policy_rng = _rng(cfg.policy.seed)
        self.evict_rng = _rng(cfg.data.seed, _EVICT)
        self.probe_rng = _rng(cfg.data.seed, _PROBE)
        self.init_rng = _rng(m.init_seed, _INIT)
        self.pq = None
        quantized = cfg.memory.payload == "quantized"
        budget = cfg.memory.budget_bytes or None
        self.buffer = MemoryBuffer(
            self.dataset.dim,
            budget,
            PayloadKind.QUANTIZED if quantized else PayloadKind.RAW,
            cfg.memory.pq_codebooks if quantized else 0,
        )
        self.seen = set(self.schedule.base_init_classes)
        self.steps = 0
        self.samples_used = 0
        self.last_plan = None

    # --- helpers ------------------------------------------------------

    def _payload(self, idx):
        x = self.dataset.features[idx]
        if self.pq is not None:
            return pq_mod.encode(self.pq, x)
        return x.astype(np.float64)

    def _stored(self, idx):
        kind = PayloadKind.QUANTIZED if self.pq is not None else PayloadKind.RAW
        return StoredSample(int(idx), int(self.dataset.labels[idx]), self._payload(idx), kind)

    def _train_pq(self, rows):
        mem = self.cfg.memory
        X = self.dataset.features[rows]
        c = min(mem.pq_codebook_size, len(X))
        self.pq = pq_mod.train_pq(X, mem.pq_codebooks, c, mem.pq_iters, self.cfg.data.seed)

    def _lr(self, step, total):
        m = self.cfg.model
        return mh.one_cycle_lr(step, total, m.max_lr, m.pct_warmup, m.div_init, m.div_final)

    def _fresh_optimizer(self):
        m = self.cfg.model
        return mh.OptimizerState.for_model(self.model, m.max_lr, m.momentum, m.weight_decay)

    # --- phases -------------------------------------------------------

    def base_init(self) -> None:
        """Pretrain on base classes, train the quantizer, optionally seed the buffer."""
        ds = self.dataset
        base = np.asarray(self.schedule.base_init_classes, dtype=np.int64)
        rows = ds.train_indices()
        rows = rows[np.isin(ds.labels[rows], base)]
        if self.cfg.memory.payload == "quantized":
            fit_rows = rows if len(rows) else (self.schedule.sessions[0][:, 0] if self.schedule.sessions else rows)
            if len(fit_rows) == 0:
                raise InvalidState("no data to train the product quantizer")
            self._train_pq(fit_rows)
        if len(rows) == 0:
            return
        bi = self.cfg.base_init
        if bi.pretrain_steps > 0:
            opt = self._fresh_optimizer()
            bs = min(bi.pretrain_batch, len(rows))
            for step in range(bi.pretrain_steps):
                batch = self.init_rng.choice(rows, size=bs, replace=False)
                X = ds.features[batch]
                if self.pq is not None:
                    X = pq_mod.decode(self.pq, pq_mod.encode(self.pq, X))
                loss, grads, _ = mh.loss_and_grads(self.model, X, ds.labels[batch])
                if not np.isfinite(loss):
                    raise NumericError("non-finite loss during base init", session=0)
                mh.sgd_step(self.model, opt, grads, self._lr(step, bi.pretrain_steps))
        if bi.insert_into_buffer:
            for idx in rows:
                self.buffer.insert(self._stored(idx), protected=False, rng=self.evict_rng)

    def _policy_context(self, new_rows):
        p = self.cfg.policy
        n = self.cfg.rehearsal.batch_size
        ctx = pol.PolicyContext(
            model=self.model,
            decoder=self.pq,
            grasp_mode=pol.GraspMode(p.grasp_mode),
            kmeans_iters=p.kmeans_iters,
            mir_virtual_lr=p.mir_virtual_lr,
            mir_candidate_size=p.mir_candidate_size or min(len(self.buffer), 50 * n),
        )
        if pol.PolicyKind(p.kind) is pol.PolicyKind.MIR and len(new_rows):
            pick = self.policy_rng.choice(new_rows, size=min(n, len(new_rows)), replace=False)
            X = self.dataset.features[pick]
            if self.pq is not None:
                X = pq_mod.decode(self.pq, pq_mod.encode(self.pq, X))
            ctx.new_batch = (X, self.dataset.labels[pick])
        return ctx

    def _probe_set(self, old_classes):
        size = self.cfg.drift.probe_size
        if size <= 0 or not old_classes:
            return None
        rows = np.flatnonzero(self.dataset.test_mask_for(old_classes))
        if len(rows) == 0:
            return None
        rows = np.sort(self.probe_rng.choice(rows, size=min(size, len(rows)), replace=False))
        return self.dataset.features[rows]

    def run_session(self, t, events) -> SessionReport:
        start = time.perf_counter()
        cfg = self.cfg
        n, b = cfg.rehearsal.batch_size, cfg.rehearsal.iterations
        U = n * b
        events = np.asarray(events, dtype=np.int64).reshape(-1, 2)
        new_rows = events[:, 0]
        old_classes = tuple(sorted(self.seen))
        new_classes = tuple(sorted({int(c) for c in events[:, 1]} - self.seen))

        # (1) acquisition; new samples are exempt from the budget until compression
        for idx in new_rows:
            self.buffer.insert(self._stored(idx), protected=True, rng=self.evict_rng)
        self.seen.update(int(c) for c in events[:, 1])

        # (2) refresh prototypes and cached distances with the current model
        self.buffer.refresh_distances(self.model, self.pq)

        # (3) selection
        ctx = self._policy_context(new_rows)
        plan = pol.select(cfg.policy.kind, self.buffer, U, ctx, self.policy_rng)
        if len(plan) != U:
            raise InvalidState(f"plan length {len(plan)} != U={U}")
        self.last_plan = plan

        # (4) rehearsal
        by_id = {s.sample_id: s for s in self.buffer.samples()}
        probe = self._probe_set(old_classes)
        curve = []
        opt = self._fresh_optimizer()
        for step in range(b):
            ids = plan.sample_ids[step * n : (step + 1) * n]
            batch = [by_id[int(i)] for i in ids]
            X = self.buffer.payloads(batch, self.pq)
            y = np.array([s.label for s in batch], dtype=np.int64)
            loss, grads, _ = mh.loss_and_grads(self.model, X, y)
            if not np.isfinite(loss):
                raise NumericError("non-finite loss", session=t)
            before = self.model.copy() if probe is not None else None
            try:
                mh.sgd_step(self.model, opt, grads, self._lr(step, b))
            except NumericError as exc:
                raise NumericError(str(exc), session=t) from None
            for s in batch:
                s.rehearsal_count += 1
            if probe is not None:
                curve.append(probe_drift(before, self.model, probe))
            self.steps += 1
            self.samples_used += len(batch)

        # (5) compression to budget
        self.buffer.compress(self.evict_rng)

        # (6) evaluation
        acc_all = self.evaluate(self.seen)[0]
        acc_new = self.evaluate(new_classes)[0] if new_classes else float("nan")
        acc_old = self.evaluate(old_classes)[0] if old_classes else float("nan")
        curve = np.asarray(curve, dtype=np.float64)
        if len(curve):
            ds = drift_summary(curve)
            auc, mean = ds.auc, ds.mean
        else:
            auc = mean = float("nan")
        report = SessionReport(
            t=t,
            acc_all=acc_all,
            acc_new=acc_new,
            acc_old=acc_old,
            drift_curve=curve,
            drift_auc=auc,
            drift_mean=mean,
            selection_counts=plan.class_counts,
            updates=self.steps,
            samples_used=self.samples_used,
            buffer_bytes=self.buffer.memory_usage(),
            new_classes=new_classes,
            old_classes=old_classes,
            duration=time.perf_counter() - start,
        )
        log.info("session %d: alpha=%.4f new=%.4f old=%.4f bytes=%d", t, acc_all, acc_new, acc_old, report.buffer_bytes)
        return report

    def evaluate(self, classes):
        mask = self.dataset.test_mask_for(classes)
        X = self.dataset.features[mask]
        y = self.dataset.labels[mask]
        acc, preds = mh.evaluate(self.model, X, y)
        return acc, preds, y


def result_row(result_meta, report: SessionReport) -> list:
    exp_id, policy, seed, digest = result_meta
    return [
        exp_id,
        policy,
        seed,
        report.t,
        _fmt(report.acc_all),
        _fmt(report.acc_new),
        _fmt(report.acc_old),
        _fmt(report.drift_auc),
        _fmt(report.drift_mean),
        report.samples_used,
        report.buffer_bytes,
        digest,
    ]


def _fmt(x) -> str:
    return "nan" if x is None or np.isnan(x) else repr(float(x))


def run_experiment(cfg: ExperimentConfig, results_path=None, experiment_id=None, engine=None) -> ExperimentResult:
    """Base init, then every session in order. Rows are flushed to `results_path` as sessions finish."""
    eng = engine or Engine(cfg)
    exp_id = experiment_id or f"{cfg.policy.kind}-s{cfg.data.seed}"
    meta = (exp_id, cfg.policy.kind, cfg.data.seed, eng.schedule.digest())
    fh = writer = None
    if results_path is not None:
        fh = open(results_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
    try:
        eng.base_init()
        reports = []
        for t, events in enumerate(eng.schedule.sessions, start=1):
            rep = eng.run_session(t, events)
            reports.append(rep)
            if writer is not None:
                writer.writerow(result_row(meta, rep))
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    _, preds, labels = eng.evaluate(eng.seen)
    return ExperimentResult(
        experiment_id=exp_id,
        policy=cfg.policy.kind,
        seed=cfg.data.seed,
        reports=reports,
        summary=summarize(reports),
        final_predictions=preds,
        final_labels=labels,
        schedule_hash=meta[3],
        total_steps=eng.steps,
    )


def offline_accuracy(cfg: ExperimentConfig, steps=2000, batch=64) -> float:
    """Joint training on every train row of the stream's classes: the non-continual ceiling."""
    eng = Engine(cfg)
    ds = eng.dataset
    classes = set(eng.schedule.base_init_classes)
    for s in eng.schedule.sessions:
        classes.update(int(c) for c in s[:, 1])
    rows = ds.train_indices()
    rows = rows[np.isin(ds.labels[rows], sorted(classes))]
    opt = eng._fresh_optimizer()
    bs = min(batch, len(rows))
    for step in range(steps):
        pick = eng.init_rng.choice(rows, size=bs, replace=False)
        _, grads, _ = mh.loss_and_grads(eng.model, ds.features[pick], ds.labels[pick])
        mh.sgd_step(eng.model, opt, grads, eng._lr(step, steps))
    return eng.evaluate(classes)[0]
