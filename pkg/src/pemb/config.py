"""Run configuration, config files and the architecture hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .lm import LmConfig

__all__ = ["MODES", "RunConfig", "load_config_file", "arch_hash"]

MODES = ("scratch", "transfer", "prompt-tuning-baseline", "vanilla-eval")

# fields that fix tensor shapes or the forward computation of a checkpoint
ARCH_FIELDS = ("vocab_size", "d_p", "d_e", "n_layers", "n_heads", "d_ff", "max_len",
               "lora_rank", "lora_alpha", "k", "vector_positions", "temperature")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "scratch"
    # method
    k: int = 5
    tau: float = 0.2
    temperature: float = 1.0
    doc_mode: str = "query-only"
    # optimization
    lr: float = 3e-3
    warmup: float = 0.03
    schedule: str = "constant"
    batch_size: int = 8
    accum_steps: int = 1
    total_steps: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    # seeds
    seed: int = 0
    prompt_lm_seed: int = 1
    backbone_seed: int = 2
    target_seed: int = 3
    data_seed: int = 0
    eval_seed: int = 1000
    # dims
    vocab_size: int = 64
    d_p: int = 32
    d_e: int = 48
    d_e2: int = 40
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    max_len: int = 64
    vector_positions: bool = True
    lora_rank: int = 4
    lora_alpha: float = 16.0
    virtual_tokens: int = 20
    # data and eval
    n_tasks: int = 4
    per_task: int = 500
    per_class: int = 10
    eval_queries: int = 512
    corpus_size: int = 16
    eval_every: int = 100
    threshold: float = 0.95
    stop_at_threshold: bool = False
    record_wall_time: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError(f"warmup ratio must lie in [0, 1), got {self.warmup}")
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")
        if self.accum_steps < 1:
            raise ConfigError(f"accum_steps must be >= 1, got {self.accum_steps}")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ConfigError("batch_size must be >= 1 and total_steps >= 0")
        if self.tau <= 0 or self.temperature <= 0:
            raise ConfigError("tau and temperature must be > 0")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be constant or cosine, got {self.schedule!r}")
        if self.doc_mode not in ("query-only", "symmetric"):
            raise ConfigError(f"doc_mode must be query-only or symmetric, got {self.doc_mode!r}")
        if self.corpus_size < 2:
            raise ConfigError(f"corpus size must be >= 2, got {self.corpus_size}")
        if self.lora_rank < 1 or self.virtual_tokens < 0 or self.eval_every < 1:
            raise ConfigError("lora_rank and eval_every must be >= 1, virtual_tokens >= 0")
        for d in ("vocab_size", "d_p", "d_e", "d_e2", "n_layers", "n_heads", "d_ff", "max_len"):
            if getattr(self, d) < 1:
                raise ConfigError(f"{d} must be >= 1")

    @classmethod
    def reference(cls, **overrides) -> "RunConfig":
        """Reference optimization settings for billion-parameter backbones (lr 1e-4, 2x8 accumulation, r=64)."""
        base = dict(lr=1e-4, warmup=0.03, batch_size=2, accum_steps=8, lora_rank=64,
                    lora_alpha=16.0, virtual_tokens=20, k=5, tau=0.2)
        base.update(overrides)
        return cls(**base)

    def replace(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        clean = {}
        for key, value in d.items():
            name = key.replace("-", "_")
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            clean[name] = _coerce(known[name], value)
        return cls(**clean)

    def lm_config(self, which: str) -> LmConfig:
        """LmConfig for 'prompt', 'backbone' or 'target' (the transfer backbone)."""
        width = {"prompt": self.d_p, "backbone": self.d_e, "target": self.d_e2}[which]
        seed = {"prompt": self.prompt_lm_seed, "backbone": self.backbone_seed,
                "target": self.target_seed}[which]
        return LmConfig(vocab_size=self.vocab_size, d_model=width, n_layers=self.n_layers,
                        n_heads=self.n_heads, d_ff=self.d_ff, max_len=self.max_len, seed=seed,
                        vector_positions=self.vector_positions)

    def arch_dict(self) -> dict[str, Any]:
        return {f: getattr(self, f) for f in ARCH_FIELDS}

    def hash(self) -> bytes:
        return arch_hash(self.arch_dict())


def arch_hash(arch: dict[str, Any]) -> bytes:
    blob = json.dumps(arch, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.blake2b(blob, digest_size=8).digest()


def _coerce(f, value):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind == "bool":
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for {f.name} ({kind})") from None


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Key/value mapping from a YAML or JSON file (JSON is a YAML subset)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a key/value mapping")
    return data
