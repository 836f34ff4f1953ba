"""InfoNCE over a positive, its paired hard negative and in-batch positives."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError
from .tensor import Tensor

__all__ = ["TrainingTriplet", "CandidateSet", "build_candidates", "candidate_index", "info_nce"]

log = logging.getLogger(__name__)


def _seq(x) -> tuple[int, ...]:
    return tuple(int(v) for v in np.asarray(x, dtype=np.int64).reshape(-1))


@dataclass(frozen=True)
class TrainingTriplet:
    instruction: tuple[int, ...]
    query: tuple[int, ...]
    positive: tuple[int, ...]
    negative: tuple[int, ...]
    task: int = -1

    def __post_init__(self):
        for name in ("instruction", "query", "positive", "negative"):
            object.__setattr__(self, name, _seq(getattr(self, name)))
            if not getattr(self, name):
                raise DataError(f"triplet field {name} is empty")
        if self.query == self.negative:
            raise DataError("hard negative is identical to the query")


@dataclass(frozen=True)
class CandidateSet:
    """Documents for query i: positive first, hard negative second, then d_j+ for j != i."""

    query: int
    docs: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.docs)


def candidate_index(n_b: int) -> np.ndarray:
    """Row i lists, into the stacked [positives; negatives] table, the candidates of query i."""
    if n_b < 1:
        raise ContractError("batch must hold at least one triplet")
    idx = np.empty((n_b, n_b + 1), dtype=np.int64)
    for i in range(n_b):
        idx[i, 0] = i
        idx[i, 1] = n_b + i
        idx[i, 2:] = [j for j in range(n_b) if j != i]
    return idx


def build_candidates(batch: Sequence[TrainingTriplet]) -> list[CandidateSet]:
    n_b = len(batch)
    idx = candidate_index(n_b)
    table = [b.positive for b in batch] + [b.negative for b in batch]
    out = []
    for i in range(n_b):
        docs = tuple(table[j] for j in idx[i])
        if len(set(docs)) != len(docs):
            log.info("query %d: candidate set holds duplicate documents", i)
        out.append(CandidateSet(i, docs))
    return out


def info_nce(sims, tau: float = 0.2) -> Tensor:
    """Mean over queries of -log softmax(s_i / tau)[0]; column 0 is the positive.

    ``sims`` is [N_b x C], a Tensor (differentiable) or an array.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be > 0, got {tau}")
    S = sims if isinstance(sims, Tensor) else Tensor(np.asarray(sims, dtype=np.float64))
    if S.ndim != 2 or S.shape[1] < 1:
        raise ContractError(f"similarities must be [N_b x C], got {S.shape}")
    logits = T.scale(S, 1.0 / tau)
    lse = T.logsumexp_lastdim(logits)
    return T.mean(lse - logits[:, 0])
