"""Plain product quantization with Lloyd k-means codebooks."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, MalformedHeader, TruncatedPayload


def _sq_dists(X, C):
    # (n, k) squared Euclidean distances, clipped against cancellation
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    first = rng.integers(n)
    centers[0] = X[first]
    closest = _sq_dists(X, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # every point already coincides with a center
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers[j] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centers[j : j + 1])[:, 0])
    return centers


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignment: np.ndarray
    sse_history: list = field(default_factory=list)
    iterations: int = 0


def kmeans(X, k, iters, rng) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start.

    sse_history[i] is the within-cluster SSE after the i-th assignment step.
    Runs `iters` full iterations or until the assignment stops changing.
    Empty clusters are re-seeded to the point farthest from its center.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < k:
        raise InvalidArgument(f"need at least k={k} samples, got {X.shape[0]}")
    centers = kmeans_pp_init(X, k, rng)
    d = _sq_dists(X, centers)
    assign = np.argmin(d, axis=1)
    history = [float(d[np.arange(len(X)), assign].sum())]
    done = 0
    for _ in range(iters):
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = X[members].mean(axis=0)
        d = _sq_dists(X, centers)
        new = np.argmin(d, axis=1)
        cost = d[np.arange(len(X)), new]
        for j in range(k):
            if not np.any(new == j):
                far = int(np.argmax(cost))
                centers[j] = X[far]
                new[far] = j
                cost[far] = 0.0
        history.append(float(cost.sum()))
        done += 1
        if np.array_equal(new, assign):
            assign = new
            break
        assign = new
    return KMeansResult(centers=centers, assignment=assign, sse_history=history, iterations=done)


@dataclass
class PQModel:
    codebooks: np.ndarray  # (m, c, d_sub)
    iters: int = 0
    seed: int = 0

    @property
    def num_codebooks(self) -> int:
        return self.codebooks.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.codebooks.shape[1]

    @property
    def d_sub(self) -> int:
        return self.codebooks.shape[2]

    @property
    def dim(self) -> int:
        return self.num_codebooks * self.d_sub


def train_pq(samples, m, c, iters, seed) -> PQModel:
    X = np.asarray(samples, dtype=np.float64)
    n, d = X.shape
    if m < 1 or d % m:
        raise InvalidArgument(f"dimension {d} not divisible by m={m}")
    if not 1 <= c <= 256:
        raise InvalidArgument("codebook size must be in [1, 256]")
    if n < c:
        raise InvalidArgument(f"need at least c={c} samples, got {n}")
    rng = np.random.default_rng(seed)
    d_sub = d // m
    books = np.empty((m, c, d_sub))
    for j in range(m):
        books[j] = kmeans(X[:, j * d_sub : (j + 1) * d_sub], c, iters, rng).centers
    return PQModel(codebooks=books, iters=iters, seed=seed)


def encode(pq: PQModel, z) -> np.ndarray:
    """Nearest codeword per subspace; accepts one vector or a batch of rows."""
    Z = np.asarray(z, dtype=np.float64)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    if Z.shape[1] != pq.dim:
        raise InvalidArgument(f"expected dim {pq.dim}, got {Z.shape[1]}")
    codes = np.empty((Z.shape[0], pq.num_codebooks), dtype=np.uint8)
    s = pq.d_sub
    for j in range(pq.num_codebooks):
        # argmin returns the first minimum, i.e. the smallest index on ties
        codes[:, j] = np.argmin(_sq_dists(Z[:, j * s : (j + 1) * s], pq.codebooks[j]), axis=1)
    return codes[0] if single else codes


def decode(pq: PQModel, codes) -> np.ndarray:
    C = np.asarray(codes)
    single = C.ndim == 1
    C = np.atleast_2d(C).astype(np.int64)
    if C.shape[1] != pq.num_codebooks:
        raise InvalidArgument(f"expected {pq.num_codebooks} codes, got {C.shape[1]}")
    if C.min() < 0 or C.max() >= pq.codebook_size:
        raise InvalidArgument("code out of range")
    out = np.concatenate([pq.codebooks[j][C[:, j]] for j in range(pq.num_codebooks)], axis=1)
    return out[0] if single else out


PQM_MAGIC = b"PQM1"
_PQM_HEADER = struct.Struct("<4sIII")


def save_pq(pq: PQModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_PQM_HEADER.pack(PQM_MAGIC, pq.num_codebooks, pq.codebook_size, pq.d_sub))
        fh.write(np.ascontiguousarray(pq.codebooks, dtype="<f4").tobytes())


def load_pq(path) -> PQModel:
    raw = Path(path).read_bytes()
    if len(raw) < _PQM_HEADER.size:
        raise MalformedHeader("file shorter than PQM1 header")
    magic, m, c, d_sub = _PQM_HEADER.unpack_from(raw)
    if magic != PQM_MAGIC or not m or not c or not d_sub:
        raise MalformedHeader("not a PQM1 file")
    count = m * c * d_sub
    if len(raw) < _PQM_HEADER.size + 4 * count:
        raise TruncatedPayload("PQM1 codebooks truncated")
    books = np.frombuffer(raw, "<f4", count, _PQM_HEADER.size).reshape(m, c, d_sub)
    return PQModel(codebooks=books.astype(np.float64))
