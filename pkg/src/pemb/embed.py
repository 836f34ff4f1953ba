"""Combined input assembly, last-token embeddings and cosine similarity."""

from __future__ import annotations

from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateEmbeddingError, LengthError, ShapeError
from .lm import InputSeq, LmParams, decode, decode_batch, last_token_pool
from .tensor import Tensor

__all__ = [
    "EOS",
    "NORM_EPS",
    "CombinedInput",
    "build_combined",
    "embed_text",
    "embed_batch",
    "embed_documents",
    "normalize_rows",
    "cosine_sim",
    "cosine_matrix",
]

EOS = 0
NORM_EPS = 1e-12


def _ids(x) -> np.ndarray:
    return np.asarray(x if x is not None else [], dtype=np.int64).reshape(-1)


@dataclass
class CombinedInput:
    """Layout: instruction tokens, aligned prompts (vectors), text tokens, EOS."""

    instruction: np.ndarray
    prompts: Tensor | None
    text: np.ndarray
    eos: int = EOS

    @property
    def K(self) -> int:
        return 0 if self.prompts is None else self.prompts.shape[0]

    def __len__(self) -> int:
        return self.instruction.size + self.K + self.text.size + 1

    @property
    def prompt_offset(self) -> int:
        return self.instruction.size

    def to_seq(self) -> InputSeq:
        return InputSeq.of(self.instruction, self.prompts if self.prompts is not None else [],
                           self.text, [self.eos])


def build_combined(t, P_tilde: Tensor | None, X, eos: int = EOS,
                   max_len: int | None = None) -> CombinedInput:
    t, X = _ids(t), _ids(X)
    if P_tilde is not None and P_tilde.ndim != 2:
        raise ShapeError(f"aligned prompts must be [K x d], got {P_tilde.shape}")
    c = CombinedInput(t, P_tilde, X, int(eos))
    if max_len is not None and len(c) > max_len:
        raise LengthError(
            f"combined input needs {t.size}+{c.K}+{X.size}+1={len(c)} positions, budget is {max_len}")
    return c


def embed_text(params: LmParams, combined: CombinedInput) -> Tensor:
    """v: final-layer hidden state at the EOS position."""
    if len(combined) > params.config.max_len:
        raise LengthError(f"combined input of {len(combined)} exceeds max_len {params.config.max_len}")
    return last_token_pool(decode(params, combined.to_seq()))


def embed_batch(params: LmParams, t, P_tilde: Tensor | None, X, eos: int = EOS) -> Tensor:
    """Batched embedding for equal-length rows: t [B x m], P~ [B x K x d], X [B x n] -> [B x d]."""
    X = np.asarray(X, dtype=np.int64)
    B = X.shape[0]
    t = np.asarray(t, dtype=np.int64).reshape(B, -1) if t is not None else np.zeros((B, 0), np.int64)
    segs = [t]
    if P_tilde is not None and P_tilde.shape[1]:
        if P_tilde.shape[0] != B:
            raise ShapeError(f"prompt batch {P_tilde.shape[0]} does not match text batch {B}")
        segs.append(P_tilde)
    segs += [X, np.full((B, 1), eos, dtype=np.int64)]
    H = decode_batch(params, segments=segs)
    return H[:, -1, :]


def embed_documents(params: LmParams, docs: Sequence, eos: int = EOS, chunk: int = 256) -> np.ndarray:
    """Constant document embeddings (no instruction, no prompts) as a plain array.

    Documents are grouped by length so each group runs as one batch; the
    output keeps the input order.
    """
    groups: dict[int, list[int]] = defaultdict(list)
    docs = [_ids(d) for d in docs]
    for i, d in enumerate(docs):
        groups[d.size].append(i)
    out = np.zeros((len(docs), params.config.d_model), dtype=params.dtype)
    for _, idx in sorted(groups.items()):
        for s in range(0, len(idx), chunk):
            part = idx[s:s + chunk]
            X = np.stack([docs[i] for i in part])
            out[part] = embed_batch(params, None, None, X, eos).data
    return out


def _check_norms(norms: np.ndarray) -> None:
    if np.any(norms <= NORM_EPS):
        raise DegenerateEmbeddingError(f"embedding norm {float(norms.min()):.3g} is below {NORM_EPS}")


def normalize_rows(v: Tensor) -> Tensor:
    n = T.sqrt(T.tsum(v * v, axis=-1, keepdims=True))
    _check_norms(n.data)
    return v / n


def cosine_sim(a, b) -> float:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    _check_norms(np.array([na, nb]))
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(Q: Tensor, D: Tensor) -> Tensor:
    """S[i, j] = cos(Q_i, D_j), differentiable in both arguments."""
    return normalize_rows(Q) @ T.transpose(normalize_rows(D))
