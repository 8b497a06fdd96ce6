"""Run configuration: retrieval, memory, backend and file paths."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .retrieval import ConfigError, RetrievalConfig


@dataclass
class MemoryConfig:
    enabled: bool = True
    capacity: int = 200
    lambda_sim: float = 0.6
    lambda_hit: float = 0.4
    w_exp: int = 10
    cross_threshold: float = 0.8
    decay: float = 0.9
    min_keep: int = 5
    reuse_threshold: float = 0.9  # indicator cosine needed to reuse a stored trace

    def __post_init__(self):
        if self.capacity < 1 or self.w_exp < 1:
            raise ConfigError("memory capacity and w_exp must be >= 1")
        if abs(self.lambda_sim + self.lambda_hit - 1.0) > 1e-9:
            raise ConfigError("lambda_sim + lambda_hit must be 1")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must be in (0, 1]")


@dataclass
class BackendConfig:
    kind: str = "scripted"  # scripted | http
    script: str | None = None  # rules file; bundled rules when unset
    endpoint: str | None = None
    model: str | None = None
    temperature: float = 0.4
    final_temperature: float = 0.0
    max_tokens: int = 256
    timeout: float = 60.0
    max_in_flight: int = 4

    def __post_init__(self):
        if self.kind not in ("scripted", "http"):
            raise ConfigError(f"unknown backend {self.kind!r}")


@dataclass
class Config:
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    tkg: str | None = None
    aliases: str | None = None
    memory_file: str | None = None
    cold_start: str | None = None  # bundled exemplars when unset
    use_tree: bool = True
    use_graph: bool = True
    use_dense: bool = True
    link_threshold: float = 0.35
    normalize_answers: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict | None):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> Config:
    data = dict(data or {})
    parts = {
        "retrieval": _build(RetrievalConfig, data.pop("retrieval", None)),
        "memory": _build(MemoryConfig, data.pop("memory", None)),
        "backend": _build(BackendConfig, data.pop("backend", None)),
    }
    cfg = _build(Config, data)
    for k, v in parts.items():
        setattr(cfg, k, v)
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return config_from_dict(data or {})
