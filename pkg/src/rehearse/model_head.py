"""Small classifier heads with hand-written backprop, SGD and a one-cycle schedule."""

from __future__ import annotations

import copy
import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, MalformedHeader, NumericError, TruncatedPayload


class Arch(str, enum.Enum):
    LINEAR = "linear"
    MLP1 = "mlp1"


@dataclass
class ClassifierHead:
    """LINEAR: logits = x W^T + b.  MLP1: z = relu(x W1^T + b1), logits = z W2^T + b2.

    Parameters live in `params` in declaration order; the penultimate embedding
    z is the input itself for LINEAR.
    """

    arch: Arch
    d_in: int
    num_classes: int
    hidden_dim: int = 0
    params: dict = field(default_factory=dict)

    def copy(self) -> "ClassifierHead":
        return copy.deepcopy(self)

    @property
    def embed_dim(self) -> int:
        return self.d_in if self.arch is Arch.LINEAR else self.hidden_dim


def init_head(arch, d_in, num_classes, hidden_dim=0, seed=0, scale=None) -> ClassifierHead:
    arch = Arch(arch)
    rng = np.random.default_rng(seed)
    if arch is Arch.LINEAR:
        s = scale if scale is not None else 0.01
        params = {
            "W": s * rng.standard_normal((num_classes, d_in)),
            "b": np.zeros(num_classes),
        }
        hidden_dim = 0
    else:
        if hidden_dim < 1:
            raise InvalidArgument("MLP1 needs hidden_dim >= 1")
        # He init for the rectifier layer
        params = {
            "W1": rng.standard_normal((hidden_dim, d_in)) * math.sqrt(2.0 / d_in),
            "b1": np.zeros(hidden_dim),
            "W2": rng.standard_normal((num_classes, hidden_dim)) * math.sqrt(1.0 / hidden_dim),
            "b2": np.zeros(num_classes),
        }
    return ClassifierHead(arch=arch, d_in=d_in, num_classes=num_classes, hidden_dim=hidden_dim, params=params)


def _check_input(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.d_in:
        raise InvalidArgument(f"expected input with {model.d_in} columns, got shape {X.shape}")
    return X


def embed(model: ClassifierHead, X) -> np.ndarray:
    """Penultimate embedding z only."""
    X = _check_input(model, X)
    if model.arch is Arch.LINEAR:
        return X
    p = model.params
    return np.maximum(X @ p["W1"].T + p["b1"], 0.0)


def forward(model: ClassifierHead, X):
    X = _check_input(model, X)
    p = model.params
    if model.arch is Arch.LINEAR:
        return X @ p["W"].T + p["b"], X
    z = np.maximum(X @ p["W1"].T + p["b1"], 0.0)
    return z @ p["W2"].T + p["b2"], z


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def per_sample_loss(model, X, y) -> np.ndarray:
    logits, _ = forward(model, X)
    y = np.asarray(y, dtype=np.int64)
    return -log_softmax(logits)[np.arange(len(y)), y]


def loss_and_grads(model: ClassifierHead, X, y):
    """Mean cross-entropy, its exact gradient per parameter, and the per-sample losses."""
    X = _check_input(model, X)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    if n == 0:
        raise InvalidArgument("empty batch")
    if y.shape != (n,):
        raise InvalidArgument("labels must have one entry per row")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise InvalidArgument("label out of range")
    p = model.params
    logits, z = forward(model, X)
    logp = log_softmax(logits)
    rows = np.arange(n)
    losses = -logp[rows, y]
    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    dlogits /= n
    if model.arch is Arch.LINEAR:
        grads = {"W": dlogits.T @ X, "b": dlogits.sum(axis=0)}
    else:
        dz = dlogits @ p["W2"]
        dz *= z > 0
        grads = {
            "W1": dz.T @ X,
            "b1": dz.sum(axis=0),
            "W2": dlogits.T @ z,
            "b2": dlogits.sum(axis=0),
        }
    return float(losses.mean()), grads, losses


@dataclass
class OptimizerState:
    lr: float = 0.1  # base / max LR
    momentum: float = 0.9
    weight_decay: float = 1e-5
    buffers: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model, lr=0.1, momentum=0.9, weight_decay=1e-5):
        bufs = {k: np.zeros_like(v) for k, v in model.params.items()}
        return cls(lr=lr, momentum=momentum, weight_decay=weight_decay, buffers=bufs)


def sgd_step(model: ClassifierHead, opt: OptimizerState, grads, lr) -> None:
    """In place: v <- m*v + g + wd*theta; theta <- theta - lr*v."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    for name, theta in model.params.items():
        v = opt.buffers.get(name)
        if v is None:
            v = opt.buffers[name] = np.zeros_like(theta)
        v *= opt.momentum
        v += grads[name]
        if opt.weight_decay:
            v += opt.weight_decay * theta
        theta -= lr * v


def one_cycle_lr(step, total_steps, max_lr, pct_warmup=0.3, div_init=25.0, div_final=1e4) -> float:
    """Cosine warmup from max_lr/div_init to max_lr, then cosine anneal to max_lr/div_final.

    The peak sits at step round(pct_warmup * total_steps), clamped to the last step.
    """
    if total_steps <= 0:
        raise InvalidArgument("total_steps must be positive")
    if not 0 <= step < total_steps:
        raise InvalidArgument(f"step {step} outside [0, {total_steps})")
    lo, hi = max_lr / div_init, max_lr
    end = max_lr / div_final
    peak = min(int(round(pct_warmup * total_steps)), total_steps - 1)
    if step <= peak:
        if peak == 0:
            return hi
        frac = step / peak
        return lo + (hi - lo) * 0.5 * (1.0 - math.cos(math.pi * frac))
    frac = (step - peak) / (total_steps - 1 - peak)
    return end + (hi - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def evaluate(model: ClassifierHead, X, y):
    X = _check_input(model, X)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise InvalidArgument("empty evaluation set")
    logits, _ = forward(model, X)
    preds = np.argmax(logits, axis=1)  # first maximum -> smallest class id
    return float(np.mean(preds == y)), preds


# --- checkpoint container -------------------------------------------------

HEAD_MAGIC = b"HEAD"
_HEAD_HEADER = struct.Struct("<4sIIII")
_ARCH_TAG = {Arch.LINEAR: 0, Arch.MLP1: 1}


def save_head(model: ClassifierHead, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEAD_HEADER.pack(HEAD_MAGIC, _ARCH_TAG[model.arch], model.d_in, model.hidden_dim, model.num_classes))
        for v in model.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_head(path) -> ClassifierHead:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD_HEADER.size:
        raise MalformedHeader("file shorter than HEAD header")
    magic, tag, d_in, hidden, K = _HEAD_HEADER.unpack_from(raw)
    if magic != HEAD_MAGIC or tag not in (0, 1):
        raise MalformedHeader("not a HEAD checkpoint")
    model = init_head(Arch.LINEAR if tag == 0 else Arch.MLP1, d_in, K, hidden)
    off = _HEAD_HEADER.size
    for name, v in model.params.items():
        nbytes = v.size * 4
        if off + nbytes > len(raw):
            raise TruncatedPayload(f"checkpoint truncated in parameter {name}")
        model.params[name] = np.frombuffer(raw, "<f4", v.size, off).reshape(v.shape).astype(np.float64)
        off += nbytes
    return model
