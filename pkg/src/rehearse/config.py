"""Experiment configuration: nested dataclasses <-> INI-style text."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .errors import RehearseError


class ConfigError(RehearseError, ValueError):
    def __init__(self, message, section=None, key=None, line=None):
        where = ".".join(p for p in (section, key) if p)
        prefix = f"{where}: " if where else ""
        if line is not None:
            prefix = f"line {line}: " + prefix
        super().__init__(prefix + message)
        self.section, self.key, self.line = section, key, line


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a path to an EMB1 file
    num_classes: int = 20
    dim: int = 32
    per_class: int = 200
    separation: float = 3.0
    noise: float = 1.0
    seed: int = 0


@dataclass
class StreamConfig:
    mode: str = "cil"
    num_sessions: int = 5
    base_init_classes: int = 5
    tail_fraction: float = 0.0
    tail_keep: float = 1.0


@dataclass
class PolicyConfig:
    kind: str = ""  # required
    grasp_mode: str = "stochastic"
    kmeans_iters: int = 20
    mir_virtual_lr: float = 0.1
    mir_candidate_size: int = 0  # 0 -> min(buffer size, 50 * n)
    seed: int = 0


@dataclass
class RehearsalConfig:
    iterations: int = 50  # b
    batch_size: int = 32  # n


@dataclass
class MemoryConfig:
    budget_bytes: int = 0  # 0 -> unbounded
    payload: str = "raw"  # raw | quantized
    pq_codebooks: int = 8
    pq_codebook_size: int = 256
    pq_iters: int = 20


@dataclass
class ModelConfig:
    arch: str = "mlp1"
    hidden_dim: int = 64
    max_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    pct_warmup: float = 0.3
    div_init: float = 25.0
    div_final: float = 1e4
    init_seed: int = 0


@dataclass
class BaseInitConfig:
    insert_into_buffer: bool = True
    pretrain_steps: int = 200
    pretrain_batch: int = 64


@dataclass
class DriftConfig:
    probe_size: int = 0  # 0 -> no probing


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    rehearsal: RehearsalConfig = field(default_factory=RehearsalConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    base_init: BaseInitConfig = field(default_factory=BaseInitConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)

    def with_seed(self, seed) -> "ExperimentConfig":
        """Same config with data, policy and init seeds all set to `seed`."""
        return self.replace(**{"data.seed": seed, "policy.seed": seed, "model.init_seed": seed})

    def replace(self, **dotted) -> "ExperimentConfig":
        """Copy with overrides given as {"section.key": value}."""
        cfg = dataclasses.replace(self, **{f.name: dataclasses.replace(getattr(self, f.name)) for f in fields(self)})
        for path, value in dotted.items():
            section, key = path.split(".", 1)
            setattr(getattr(cfg, section), key, value)
        return cfg

    def validate(self) -> None:
        from .model_head import Arch
        from .policies import GraspMode, PolicyKind
        from .streams import Ordering

        _choice("policy", "kind", self.policy.kind, PolicyKind, required=True)
        _choice("policy", "grasp_mode", self.policy.grasp_mode, GraspMode)
        _choice("stream", "mode", self.stream.mode, Ordering)
        _choice("model", "arch", self.model.arch, Arch)
        if self.memory.payload not in ("raw", "quantized"):
            raise ConfigError("must be 'raw' or 'quantized'", "memory", "payload")
        if self.rehearsal.iterations < 1:
            raise ConfigError("must be >= 1", "rehearsal", "iterations")
        if self.rehearsal.batch_size < 1:
            raise ConfigError("must be >= 1", "rehearsal", "batch_size")
        if self.memory.budget_bytes < 0:
            raise ConfigError("must be >= 0 (0 = unbounded)", "memory", "budget_bytes")
        if self.stream.num_sessions < 1:
            raise ConfigError("must be >= 1", "stream", "num_sessions")
        if self.model.arch == "mlp1" and self.model.hidden_dim < 1:
            raise ConfigError("must be >= 1 for mlp1", "model", "hidden_dim")
        if self.drift.probe_size > 0 and self.model.arch == "linear":
            raise ConfigError("drift probing needs arch = mlp1 (linear has no hidden layer)", "drift", "probe_size")
        if self.memory.payload == "quantized":
            if self.data.dim % self.memory.pq_codebooks and self.data.source == "synthetic":
                raise ConfigError("data.dim must be divisible by pq_codebooks", "memory", "pq_codebooks")
            if not 1 <= self.memory.pq_codebook_size <= 256:
                raise ConfigError("must be in [1, 256]", "memory", "pq_codebook_size")


def _choice(section, key, value, enum_cls, required=False):
    if required and not value:
        raise ConfigError("required field is missing", section, key)
    try:
        enum_cls(value)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_cls)
        raise ConfigError(f"{value!r} is not one of: {allowed}", section, key) from None


def _convert(raw, typ, section, key, line=None):
    try:
        if typ in (bool, "bool"):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {getattr(typ, '__name__', typ)}", section, key, line) from None


def _line_of(text, section, key):
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and "=" in s and s.split("=", 1)[0].strip() == key:
            return i
    return None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"syntax error: {exc}", line=getattr(exc, "lineno", None)) from None
    cfg = ExperimentConfig()
    sections = {f.name: f for f in fields(ExperimentConfig)}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]", line=_line_of(text, name, None))
        target = getattr(cfg, name)
        known = {f.name: f for f in fields(target)}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError("unknown field", name, key, _line_of(text, name, key))
            setattr(target, key, _convert(raw, known[key].type, name, key, _line_of(text, name, key)))
    if not parser.has_option("policy", "kind"):
        raise ConfigError("required field is missing", "policy", "kind")
    try:
        cfg.validate()
    except ConfigError as exc:
        line = _line_of(text, exc.section, exc.key) if exc.key else None
        if line is not None:
            raise ConfigError(str(exc), line=line) from None
        raise
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def serialize_config(cfg: ExperimentConfig) -> str:
    out = []
    for sec in fields(cfg):
        out.append(f"[{sec.name}]")
        obj = getattr(cfg, sec.name)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{f.name} = {v}")
        out.append("")
    return "\n".join(out)
