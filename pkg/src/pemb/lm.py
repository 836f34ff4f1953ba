"""Decoder-only causal transformer used for both the prompting and embedding LMs.

Pre-norm blocks, learned absolute positions, multi-head causal attention and a
GELU feed-forward. Parameters live in :class:`LmParams`; LoRA deltas on chosen
projections live in a separate :class:`LoraAdapter` so the base weights can stay
frozen.
"""

from __future__ import annotations

import math
import zlib
from collections.abc import Iterator, Sequence
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, LengthError, ShapeError
from .tensor import Tensor

__all__ = [
    "LmConfig",
    "LmParams",
    "LoraAdapter",
    "InputSeq",
    "init_lm",
    "decode",
    "decode_batch",
    "decode_embedded",
    "embed_inputs",
    "lm_head",
    "last_token_pool",
]


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    max_len: int = 64
    seed: int = 0
    # Per-role init scales. Embeddings dominate the residual stream at init so a
    # frozen random backbone still carries token identity to the last position.
    emb_std: float = 1.0
    pos_std: float = 0.1
    qk_std: float = 0.25
    vo_std: float = 0.1
    ff_std: float = 0.02
    head_std: float | None = None  # None -> 1/sqrt(d_model)
    vector_positions: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {self.max_len}")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


def _param_shapes(cfg: LmConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, h, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    out = [("tok_emb", (v, d), "emb"), ("pos_emb", (cfg.max_len, d), "pos")]
    for layer in range(cfg.n_layers):
        p = f"blocks.{layer}."
        out += [
            (p + "ln1", (d,), "one"),
            (p + "wq", (d, d), "qk"),
            (p + "wk", (d, d), "qk"),
            (p + "wv", (d, d), "vo"),
            (p + "wo", (d, d), "vo"),
            (p + "ln2", (d,), "one"),
            (p + "w1", (d, h), "ff"),
            (p + "w2", (h, d), "ff"),
        ]
    out += [("ln_f", (d,), "one"), ("head", (d, v), "head")]
    return out


class LmParams:
    """psi = {E, theta, phi}: token table, decoder blocks and LM head.

    A frozen parameter set refuses to mark any of its tensors trainable.
    """

    def __init__(self, config: LmConfig, tensors: dict[str, Tensor], frozen: bool = True):
        self.config = config
        self.tensors = dict(tensors)
        self._frozen = False
        if frozen:
            self.freeze()

    # mapping-ish access
    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    @property
    def E(self) -> Tensor:
        return self.tensors["tok_emb"]

    @property
    def head(self) -> Tensor:
        return self.tensors["head"]

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "LmParams":
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
        self._frozen = True
        return self

    def set_trainable(self, names: Sequence[str] | None = None) -> None:
        if self._frozen:
            raise ContractError("parameter set is frozen")
        for name in names if names is not None else self.tensors:
            self.tensors[name].requires_grad = True

    def astype(self, dtype) -> "LmParams":
        tensors = {k: Tensor(v.data.astype(dtype), name=k) for k, v in self.tensors.items()}
        return LmParams(self.config, tensors, frozen=self._frozen)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    @property
    def dtype(self):
        return self.E.dtype

    def n_scalars(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_lm(config: LmConfig, dtype=np.float32, frozen: bool = True) -> LmParams:
    """Deterministic scaled-normal initialization from ``config.seed``."""
    head_std = config.head_std if config.head_std is not None else 1.0 / math.sqrt(config.d_model)
    stds = {
        "emb": config.emb_std,
        "pos": config.pos_std,
        "qk": config.qk_std,
        "vo": config.vo_std,
        "ff": config.ff_std,
        "head": head_std,
    }
    tensors = {}
    for name, shape, role in _param_shapes(config):
        if role == "one":
            arr = np.ones(shape)
        else:
            # one stream per tensor name: changing max_len only grows pos_emb
            rng = np.random.default_rng([config.seed, zlib.crc32(name.encode())])
            arr = rng.standard_normal(shape) * stds[role]
        tensors[name] = Tensor(arr.astype(dtype), name=name)
    return LmParams(config, tensors, frozen=frozen)


class LoraAdapter:
    """Low-rank deltas: effective weight ``W + (alpha/r) * B @ A``.

    For a target ``W`` of shape [a x b], ``B`` is [a x r] and starts at zero and
    ``A`` is [r x b]. Only ``A`` and ``B`` are ever trainable.
    """

    def __init__(self, factors: dict[str, tuple[Tensor, Tensor]], rank: int, alpha: float):
        self.factors = dict(factors)
        self.rank = int(rank)
        self.alpha = float(alpha)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def create(cls, params: LmParams, rank: int = 4, alpha: float = 16.0,
               targets: Sequence[str] = ("wq", "wv"), seed: int = 0,
               dtype=np.float32) -> "LoraAdapter":
        if rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
        rng = np.random.default_rng(seed)
        factors = {}
        for name, w in params.named_tensors():
            if name.rsplit(".", 1)[-1] not in targets:
                continue
            a, b = w.shape
            A = Tensor((rng.standard_normal((rank, b)) / math.sqrt(b)).astype(dtype),
                       requires_grad=True, name=f"lora.{name}.A")
            B = Tensor(np.zeros((a, rank), dtype=dtype), requires_grad=True, name=f"lora.{name}.B")
            factors[name] = (A, B)
        return cls(factors, rank, alpha)

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for name, (A, B) in self.factors.items():
            yield f"lora.{name}.A", A
            yield f"lora.{name}.B", B

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def n_scalars(self) -> int:
        return sum(t.size for t in self.tensors())

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag
            if not flag:
                t.grad = None

    def astype(self, dtype) -> "LoraAdapter":
        factors = {
            k: tuple(Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=t.name)
                     for t in pair)
            for k, pair in self.factors.items()
        }
        return LoraAdapter(factors, self.rank, self.alpha)


def _project(h: Tensor, params: LmParams, name: str, lora: LoraAdapter | None) -> Tensor:
    out = h @ params[name]
    if lora is not None and name in lora.factors:
        A, B = lora.factors[name]
        out = out + T.scale((h @ B) @ A, lora.scale)
    return out


@dataclass
class InputSeq:
    """Ordered positions, each a token id or a dense vector.

    ``segments`` is a list whose items are either 1-D integer arrays (token ids)
    or tensors of shape [n x d] (vectors entering after the embedding lookup).
    """

    segments: list = field(default_factory=list)

    @classmethod
    def of(cls, *segments) -> "InputSeq":
        segs = []
        for s in segments:
            if isinstance(s, Tensor):
                if s.ndim != 2:
                    raise ShapeError(f"vector segment must be [n x d], got {s.shape}")
                if s.shape[0]:
                    segs.append(s)
            else:
                arr = np.asarray(s, dtype=np.int64).reshape(-1)
                if arr.size:
                    segs.append(arr)
        return cls(segs)

    def __len__(self) -> int:
        return sum(len(s) if not isinstance(s, Tensor) else s.shape[0] for s in self.segments)

    def vector_mask(self) -> np.ndarray:
        parts = [np.full(s.shape[0] if isinstance(s, Tensor) else len(s), isinstance(s, Tensor))
                 for s in self.segments]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)

    def layout(self) -> tuple:
        return tuple(("v" if isinstance(s, Tensor) else "t", len(s) if not isinstance(s, Tensor)
                      else s.shape[0]) for s in self.segments)


def _positions(params: LmParams, length: int, vector_mask: np.ndarray) -> Tensor:
    pos = params["pos_emb"][:length] if length < params.config.max_len else params["pos_emb"]
    if params.config.vector_positions or not vector_mask.any():
        return pos
    keep = (~vector_mask).astype(params.dtype)[:, None]
    return T.mul(pos, Tensor(keep))


def _check_len(params: LmParams, length: int) -> None:
    if length > params.config.max_len:
        raise LengthError(f"sequence length {length} exceeds max_len {params.config.max_len}")
    if length < 1:
        raise ContractError("empty input sequence")


def embed_inputs(params: LmParams, seq: InputSeq) -> Tensor:
    """[len x d] input rows: token lookups and raw vectors, plus positions."""
    n = len(seq)
    _check_len(params, n)
    d = params.config.d_model
    rows = []
    for s in seq.segments:
        if isinstance(s, Tensor):
            if s.shape[1] != d:
                raise ShapeError(f"vector positions have width {s.shape[1]}, model expects {d}")
            rows.append(s)
        else:
            rows.append(T.gather_rows(params.E, s))
    x = rows[0] if len(rows) == 1 else T.concat_rows(rows)
    return x + _positions(params, n, seq.vector_mask())


def decode_embedded(params: LmParams, x: Tensor, lora: LoraAdapter | None = None) -> Tensor:
    """Run the block stack on already-embedded rows ``x`` of shape [B x S x d]."""
    cfg = params.config
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    B, S, d = x.shape
    H = cfg.n_heads
    dh = d // H
    inv = 1.0 / math.sqrt(dh)
    for layer in range(cfg.n_layers):
        p = f"blocks.{layer}."
        h = T.layer_norm(x, params[p + "ln1"], cfg.ln_eps)
        q = T.transpose(_project(h, params, p + "wq", lora).reshape(B, S, H, dh), (0, 2, 1, 3))
        k = T.transpose(_project(h, params, p + "wk", lora).reshape(B, S, H, dh), (0, 2, 3, 1))
        v = T.transpose(_project(h, params, p + "wv", lora).reshape(B, S, H, dh), (0, 2, 1, 3))
        att = T.softmax_lastdim(T.scale(q @ k, inv), causal=True)
        o = T.transpose(att @ v, (0, 2, 1, 3)).reshape(B, S, d)
        x = x + _project(o, params, p + "wo", lora)
        h = T.layer_norm(x, params[p + "ln2"], cfg.ln_eps)
        x = x + T.gelu(_project(h, params, p + "w1", lora)) @ params[p + "w2"]
    out = T.layer_norm(x, params["ln_f"], cfg.ln_eps)
    return out[0] if squeeze else out


def decode(params: LmParams, seq: InputSeq, lora: LoraAdapter | None = None) -> Tensor:
    """Final-layer hidden states H [len x d] for one mixed token/vector sequence."""
    return decode_embedded(params, embed_inputs(params, seq), lora)


def decode_batch(params: LmParams, seqs: Sequence[InputSeq] | None = None,
                 lora: LoraAdapter | None = None, *, segments: Sequence | None = None) -> Tensor:
    """Batched decode of sequences sharing one layout -> [B x len x d].

    Either pass ``seqs`` (same segment layout each), or ``segments`` already
    batched: integer arrays [B x n] for tokens and tensors [B x n x d] for
    vector runs.
    """
    if segments is None:
        if not seqs:
            raise ContractError("decode_batch needs at least one sequence")
        layout = seqs[0].layout()
        if any(s.layout() != layout for s in seqs[1:]):
            raise ShapeError("decode_batch: sequences have different layouts")
        segments = []
        for i, (kind, _) in enumerate(layout):
            if kind == "t":
                segments.append(np.stack([s.segments[i] for s in seqs]))
            else:
                segments.append(T.stack([s.segments[i] for s in seqs]))
    d = params.config.d_model
    parts, mask = [], []
    for seg in segments:
        if isinstance(seg, Tensor):
            if seg.ndim != 3 or seg.shape[2] != d:
                raise ShapeError(f"vector segment must be [B x n x {d}], got {seg.shape}")
            parts.append(seg)
            mask.append(np.ones(seg.shape[1], dtype=bool))
        else:
            seg = np.asarray(seg, dtype=np.int64)
            if seg.ndim != 2:
                raise ShapeError(f"token segment must be [B x n], got {seg.shape}")
            if seg.shape[1] == 0:
                continue
            parts.append(T.gather_rows(params.E, seg))
            mask.append(np.zeros(seg.shape[1], dtype=bool))
    n = sum(m.size for m in mask)
    _check_len(params, n)
    x = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
    x = x + _positions(params, n, np.concatenate(mask))
    return decode_embedded(params, x, lora)


def lm_head(params: LmParams, h: Tensor) -> Tensor:
    """Vocabulary logits phi(h) for h of shape [d] or [..., d]."""
    if h.ndim == 1:
        return (h.reshape(1, h.shape[0]) @ params.head).reshape(params.config.vocab_size)
    return h @ params.head


def last_token_pool(H: Tensor) -> Tensor:
    """Hidden state of the final position: [len x d] -> [d] (or batched)."""
    if H.ndim < 2 or H.shape[-2] == 0:
        raise ContractError(f"last_token_pool needs at least one row, got shape {H.shape}")
    return H[..., -1, :]
