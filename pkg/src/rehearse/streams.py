"""Labeled feature datasets and their realization as session-ordered streams."""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    InvalidArgument,
    LabelOutOfRange,
    MalformedHeader,
    NonFiniteValue,
    TruncatedPayload,
)

EMB1_MAGIC = b"EMB1"
_EMB1_HEADER = struct.Struct("<4sIII")

TRAIN, TEST = 0, 1


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, d_in) float
    labels: np.ndarray  # (n,) int64
    split: np.ndarray  # (n,) uint8, 0=train 1=test
    num_classes: int

    def __post_init__(self):
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise InvalidArgument("features must be a 2-D matrix")
        if self.labels.shape != (n,) or self.split.shape != (n,):
            raise InvalidArgument("labels/split must have one entry per row")
        if self.num_classes < 2:
            raise InvalidArgument("need at least 2 classes")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.features.shape[0]

    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.split == TRAIN)

    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(self.split == TEST)

    def test_mask_for(self, classes) -> np.ndarray:
        return (self.split == TEST) & np.isin(self.labels, np.asarray(list(classes), dtype=np.int64))


def load_embedding_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _EMB1_HEADER.size:
        raise MalformedHeader(f"{path}: file shorter than EMB1 header")
    magic, n, d, k = _EMB1_HEADER.unpack_from(raw, 0)
    if magic != EMB1_MAGIC:
        raise MalformedHeader(f"{path}: bad magic {magic!r}")
    if d == 0 or k < 2:
        raise MalformedHeader(f"{path}: invalid header dims n={n} d={d} K={k}")
    need = _EMB1_HEADER.size + n * d * 4 + n * 4 + n
    if len(raw) < need:
        raise TruncatedPayload(f"{path}: expected {need} bytes, got {len(raw)}")
    if len(raw) > need:
        raise MalformedHeader(f"{path}: {len(raw) - need} trailing bytes after payload")
    off = _EMB1_HEADER.size
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += n * d * 4
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off)
    off += n * 4
    split = np.frombuffer(raw, dtype="u1", count=n, offset=off)
    if not np.all(np.isfinite(feats)):
        raise NonFiniteValue(f"{path}: non-finite feature value")
    if n and labels.max() >= k:
        raise LabelOutOfRange(f"{path}: label {int(labels.max())} >= n_classes {k}")
    if n and split.max() > 1:
        raise MalformedHeader(f"{path}: split flag must be 0 or 1")
    return Dataset(
        features=feats.astype(np.float64),
        labels=labels.astype(np.int64),
        split=split.copy(),
        num_classes=int(k),
    )


def save_embedding_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_EMB1_HEADER.pack(EMB1_MAGIC, len(ds), ds.dim, ds.num_classes))
        fh.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(ds.split, dtype="u1").tobytes())


def generate_synthetic(num_classes, dim, per_class, separation, noise, seed) -> Dataset:
    """Gaussian class clusters with means on a sphere of radius `separation`.

    Each class gets `per_class` rows; round(0.2 * per_class) of them (at least
    one) are tagged test. Output is a pure function of the arguments.
    """
    if num_classes < 2:
        raise InvalidArgument("num_classes must be >= 2")
    if per_class < 2:
        raise InvalidArgument("per_class must be >= 2 (one train, one test)")
    if dim < 1:
        raise InvalidArgument("dim must be >= 1")
    if separation < 0 or noise <= 0:
        raise InvalidArgument("separation must be >= 0 and noise > 0")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((num_classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * dirs
    n_test = max(1, int(round(0.2 * per_class)))
    n_test = min(n_test, per_class - 1)
    feats = np.empty((num_classes * per_class, dim))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    split = np.zeros(num_classes * per_class, dtype=np.uint8)
    for k in range(num_classes):
        rows = slice(k * per_class, (k + 1) * per_class)
        feats[rows] = means[k] + noise * rng.standard_normal((per_class, dim))
        split[k * per_class + per_class - n_test : (k + 1) * per_class] = TEST
    return Dataset(features=feats, labels=labels, split=split, num_classes=num_classes)


class Ordering(str, enum.Enum):
    CIL = "cil"
    IID = "iid"
    LONG_TAILED_CIL = "long_tailed_cil"


@dataclass(frozen=True)
class StreamSchedule:
    # each session: int64 array of shape (events, 2) holding (sample index, class id)
    sessions: list
    mode: Ordering
    base_init_classes: tuple = ()
    tail_classes: tuple = ()
    session_classes: list = field(default_factory=list)

    @property
    def num_sessions(self) -> int:
        return len(self.sessions)

    def all_indices(self) -> np.ndarray:
        if not self.sessions:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([s[:, 0] for s in self.sessions])

    def digest(self) -> str:
        """Short content hash, used to show two runs consumed the same stream."""
        h = hashlib.sha256()
        h.update(self.mode.value.encode())
        h.update(np.asarray(self.base_init_classes, dtype="<i8").tobytes())
        for s in self.sessions:
            h.update(b"|")
            h.update(np.ascontiguousarray(s, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


def _split_groups(classes, num_sessions):
    # equal contiguous groups, remainder goes to the final session
    size = len(classes) // num_sessions
    groups = [classes[i * size : (i + 1) * size] for i in range(num_sessions - 1)]
    groups.append(classes[(num_sessions - 1) * size :])
    return groups


def make_schedule(
    dataset: Dataset,
    mode,
    num_sessions,
    base_init_classes=0,
    tail_fraction=0.0,
    tail_keep=1.0,
    seed=0,
) -> StreamSchedule:
    mode = Ordering(mode)
    K = dataset.num_classes
    if num_sessions < 1:
        raise InvalidArgument("num_sessions must be >= 1")
    if base_init_classes < 0 or base_init_classes >= K:
        raise InvalidArgument(f"base_init_classes={base_init_classes} must be in [0, {K})")
    if not 0.0 <= tail_fraction <= 1.0 or not 0.0 < tail_keep <= 1.0:
        raise InvalidArgument("tail_fraction must be in [0,1] and tail_keep in (0,1]")

    rng = np.random.default_rng(seed)
    order = rng.permutation(K)
    base = np.sort(order[:base_init_classes])
    stream_classes = order[base_init_classes:]
    train = dataset.train_indices()
    labels = dataset.labels

    if mode is Ordering.IID:
        idx = train[~np.isin(labels[train], base)]
        idx = idx[rng.permutation(len(idx))]
        if len(idx) < num_sessions:
            raise InvalidArgument("fewer stream samples than sessions")
        chunks = np.array_split(idx, num_sessions)
        sessions = [np.stack([c, labels[c]], axis=1) for c in chunks]
        return StreamSchedule(
            sessions=sessions,
            mode=mode,
            base_init_classes=tuple(int(c) for c in base),
            session_classes=[tuple(sorted({int(c) for c in labels[ch]})) for ch in chunks],
        )

    if len(stream_classes) < num_sessions:
        raise InvalidArgument(
            f"{len(stream_classes)} stream classes cannot fill {num_sessions} sessions"
        )

    keep = {}
    tail = ()
    if mode is Ordering.LONG_TAILED_CIL:
        n_tail = int(round(tail_fraction * len(stream_classes)))
        tail = tuple(sorted(int(c) for c in rng.choice(stream_classes, size=n_tail, replace=False)))
        for c in tail:
            rows = train[labels[train] == c]
            n_keep = max(1, int(round(tail_keep * len(rows))))
            keep[c] = np.sort(rng.choice(rows, size=n_keep, replace=False))

    sessions, session_classes = [], []
    for group in _split_groups(stream_classes, num_sessions):
        parts = []
        for c in group:
            c = int(c)
            parts.append(keep[c] if c in keep else train[labels[train] == c])
        idx = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
        idx = idx[rng.permutation(len(idx))]
        sessions.append(np.stack([idx, labels[idx]], axis=1).astype(np.int64))
        session_classes.append(tuple(sorted(int(c) for c in group)))
    return StreamSchedule(
        sessions=sessions,
        mode=mode,
        base_init_classes=tuple(int(c) for c in base),
        tail_classes=tail,
        session_classes=session_classes,
    )
