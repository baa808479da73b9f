"""Class-partitioned rehearsal memory with prototype distances and a byte budget."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model_head as mh
from . import quantizer as pq_mod
from .errors import CapacityError, InvalidArgument, InvalidState, MalformedHeader, TruncatedPayload

NORM_EPS = 1e-12


class PayloadKind(enum.IntEnum):
    RAW = 0
    QUANTIZED = 1


@dataclass
class StoredSample:
    sample_id: int
    label: int
    payload: np.ndarray  # float64 features (RAW) or uint8 codes (QUANTIZED)
    kind: PayloadKind = PayloadKind.RAW
    distance: float = float("nan")
    rehearsal_count: int = 0
    protected: bool = False


def cosine_distance(z, q) -> float:
    z = np.asarray(z, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    nz, nq = np.linalg.norm(z), np.linalg.norm(q)
    if nz < NORM_EPS or nq < NORM_EPS:
        return 1.0
    return float(np.clip(1.0 - np.dot(z, q) / (nz * nq), 0.0, 2.0))


def cosine_distances(Z, q) -> np.ndarray:
    """Row-wise version of cosine_distance against a single prototype."""
    Z = np.asarray(Z, dtype=np.float64)
    nq = np.linalg.norm(q)
    nz = np.linalg.norm(Z, axis=1)
    out = np.ones(Z.shape[0])
    if nq < NORM_EPS:
        return out
    ok = nz >= NORM_EPS
    out[ok] = 1.0 - (Z[ok] @ q) / (nz[ok] * nq)
    return np.clip(out, 0.0, 2.0)


class MemoryBuffer:
    """M = {(X, D)_k}: per-class sample lists with cached prototype distances.

    `budget_bytes=None` means unbounded. Only unprotected samples count
    toward the budget and only they can be evicted.
    """

    def __init__(self, dim, budget_bytes=None, kind=PayloadKind.RAW, num_codebooks=0):
        self.dim = int(dim)
        self.kind = PayloadKind(kind)
        self.num_codebooks = int(num_codebooks)
        if self.kind is PayloadKind.QUANTIZED and self.num_codebooks < 1:
            raise InvalidArgument("quantized buffer needs num_codebooks >= 1")
        if budget_bytes is not None and budget_bytes <= 0:
            raise InvalidArgument("budget must be positive when bounded")
        self.budget_bytes = budget_bytes
        self.classes: dict[int, list[StoredSample]] = {}
        self.prototypes: dict[int, np.ndarray] = {}
        self._ids: set[int] = set()
        self._unprot: dict[int, int] = {}

    # --- accounting ---------------------------------------------------

    @property
    def bytes_per_sample(self) -> int:
        return self.dim * 4 if self.kind is PayloadKind.RAW else self.num_codebooks

    @property
    def bounded(self) -> bool:
        return self.budget_bytes is not None

    def __len__(self):
        return len(self._ids)

    def __contains__(self, sample_id):
        return sample_id in self._ids

    def class_ids(self) -> list[int]:
        return sorted(k for k, v in self.classes.items() if v)

    def samples(self):
        """All stored samples, ascending class id then insertion order."""
        for k in self.class_ids():
            yield from self.classes[k]

    def unprotected_count(self, k) -> int:
        return self._unprot.get(k, 0)

    def memory_usage(self) -> int:
        return sum(self._unprot.values()) * self.bytes_per_sample

    # --- mutation -----------------------------------------------------

    def insert(self, sample: StoredSample, protected=False, rng=None):
        """Append `sample`; if that puts the buffer over budget, evict once.

        Returns the evicted sample's id, or None.
        """
        self._check_payload(sample)
        if sample.sample_id in self._ids:
            raise InvalidArgument(f"duplicate sample id {sample.sample_id}")
        sample.protected = bool(protected)
        self._add(sample)
        evicted = None
        if self.bounded and self.memory_usage() > self.budget_bytes:
            evicted = self.evict_one(rng)
        return evicted

    def evict_one(self, rng) -> int:
        """Remove a uniformly random unprotected sample from a largest class."""
        if rng is None:
            raise InvalidArgument("eviction needs an rng")
        counts = self._unprot
        top = max(counts.values(), default=0)
        if top == 0:
            raise CapacityError("over budget but every stored sample is protected")
        largest = sorted(k for k, c in counts.items() if c == top)
        k = largest[rng.integers(len(largest))] if len(largest) > 1 else largest[0]
        members = self.classes[k]
        candidates = [i for i, s in enumerate(members) if not s.protected]
        victim = members.pop(candidates[rng.integers(len(candidates))])
        self._ids.discard(victim.sample_id)
        self._unprot[k] -= 1
        if not members:
            del self.classes[k]
            del self._unprot[k]
            self.prototypes.pop(k, None)
        return victim.sample_id

    def _add(self, sample):
        k = int(sample.label)
        self.classes.setdefault(k, []).append(sample)
        self._unprot[k] = self._unprot.get(k, 0) + (not sample.protected)
        self._ids.add(sample.sample_id)

    def clear_protection(self) -> None:
        for s in self.samples():
            s.protected = False
        self._unprot = {k: len(v) for k, v in self.classes.items()}

    def compress(self, rng) -> list[int]:
        """Clear protection, then evict until within budget."""
        self.clear_protection()
        evicted = []
        if self.bounded:
            while self.memory_usage() > self.budget_bytes:
                evicted.append(self.evict_one(rng))
        return evicted

    def _check_payload(self, sample):
        p = np.asarray(sample.payload)
        if PayloadKind(sample.kind) is not self.kind:
            raise InvalidArgument(f"buffer stores {self.kind.name} payloads")
        want = self.dim if self.kind is PayloadKind.RAW else self.num_codebooks
        if p.shape != (want,):
            raise InvalidArgument(f"payload shape {p.shape} != ({want},)")

    # --- prototypes & distances --------------------------------------

    def class_payloads(self, k, decoder=None) -> np.ndarray:
        """Model inputs for class k, decoding quantized payloads."""
        P = np.stack([s.payload for s in self.classes[k]])
        if self.kind is PayloadKind.QUANTIZED:
            if decoder is None:
                raise InvalidState("quantized buffer needs a PQ decoder")
            return pq_mod.decode(decoder, P)
        return P.astype(np.float64, copy=False)

    def payloads(self, samples, decoder=None) -> np.ndarray:
        P = np.stack([s.payload for s in samples])
        if self.kind is PayloadKind.QUANTIZED:
            if decoder is None:
                raise InvalidState("quantized buffer needs a PQ decoder")
            return pq_mod.decode(decoder, P)
        return P.astype(np.float64, copy=False)

    def compute_prototypes(self, model, decoder=None) -> dict[int, np.ndarray]:
        protos = {}
        for k, members in self.classes.items():
            if not members:
                raise InvalidState(f"class {k} is empty")
            protos[k] = mh.embed(model, self.class_payloads(k, decoder)).mean(axis=0)
        self.prototypes = protos
        return protos

    def refresh_distances(self, model, decoder=None) -> None:
        self.compute_prototypes(model, decoder)
        for k, members in self.classes.items():
            Z = mh.embed(model, self.class_payloads(k, decoder))
            for s, d in zip(members, cosine_distances(Z, self.prototypes[k])):
                s.distance = float(d)

    # --- snapshot -----------------------------------------------------

    def save(self, path) -> None:
        save_buffer(self, path)


BUF_MAGIC = b"BUF1"
_BUF_HEADER = struct.Struct("<4sBIIIq")
_BUF_RECORD = struct.Struct("<qBIfIB")


def save_buffer(buf: MemoryBuffer, path) -> None:
    budget = -1 if buf.budget_bytes is None else int(buf.budget_bytes)
    items = list(buf.samples())
    with open(path, "wb") as fh:
        fh.write(_BUF_HEADER.pack(BUF_MAGIC, int(buf.kind), buf.dim, buf.num_codebooks, len(items), budget))
        for s in items:
            fh.write(_BUF_RECORD.pack(s.sample_id, int(s.kind), s.label, s.distance, s.rehearsal_count, int(s.protected)))
            if s.kind is PayloadKind.RAW:
                fh.write(np.asarray(s.payload, dtype="<f4").tobytes())
            else:
                fh.write(np.asarray(s.payload, dtype="u1").tobytes())


def load_buffer(path) -> MemoryBuffer:
    raw = Path(path).read_bytes()
    if len(raw) < _BUF_HEADER.size:
        raise MalformedHeader("file shorter than BUF1 header")
    magic, kind, dim, m, n, budget = _BUF_HEADER.unpack_from(raw)
    if magic != BUF_MAGIC or kind not in (0, 1):
        raise MalformedHeader("not a BUF1 snapshot")
    buf = MemoryBuffer(dim, None if budget < 0 else budget, PayloadKind(kind), m)
    off = _BUF_HEADER.size
    for _ in range(n):
        if off + _BUF_RECORD.size > len(raw):
            raise TruncatedPayload("BUF1 record truncated")
        sid, k, label, dist, count, prot = _BUF_RECORD.unpack_from(raw, off)
        off += _BUF_RECORD.size
        if k == PayloadKind.RAW:
            size, dtype = dim * 4, "<f4"
            width = dim
        else:
            size, dtype = m, "u1"
            width = m
        if off + size > len(raw):
            raise TruncatedPayload("BUF1 payload truncated")
        payload = np.frombuffer(raw, dtype, width, off).copy()
        off += size
        if k == PayloadKind.RAW:
            payload = payload.astype(np.float64)
        s = StoredSample(sid, label, payload, PayloadKind(k), float(dist), count, bool(prot))
        buf._add(s)
    return buf
