"""Retrieval evaluation: rank each query's positive among its distractors."""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from typing import Protocol

import numpy as np

from .data import EvalItem, TaskFamily
from .errors import ConfigError

__all__ = ["Embedder", "RetrievalScore", "eval_retrieval", "OracleEmbedder", "RandomEmbedder",
           "ModelEmbedder"]


class Embedder(Protocol):
    def queries(self, instructions: Sequence[Sequence[int]], texts: Sequence[Sequence[int]]) -> np.ndarray: ...

    def documents(self, instructions: Sequence[Sequence[int]], docs: Sequence[Sequence[int]]) -> np.ndarray: ...


class RetrievalScore(dict):
    @property
    def accuracy(self) -> float:
        return self["accuracy_at_1"]

    @property
    def mrr(self) -> float:
        return self["mrr"]


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def eval_retrieval(embedder: Embedder, items: Sequence[EvalItem], chunk: int = 128) -> RetrievalScore:
    """accuracy@1 and MRR over ``items``.

    Ties count against the positive, so a constant embedder scores at the bottom.
    """
    if not items:
        raise ConfigError("empty eval set")
    C = 1 + len(items[0].distractors)
    if C < 2:
        raise ConfigError("corpus size must be >= 2")
    ranks = []
    for s in range(0, len(items), chunk):
        part = items[s:s + chunk]
        q = _unit(embedder.queries([it.instruction for it in part], [it.query for it in part]))
        docs, instr = [], []
        for it in part:
            if 1 + len(it.distractors) != C:
                raise ConfigError("eval items disagree on corpus size")
            docs += [it.positive, *it.distractors]
            instr += [it.instruction] * C
        D = _unit(embedder.documents(instr, docs)).reshape(len(part), C, -1)
        scores = np.einsum("bd,bcd->bc", q, D)
        ranks.append(1 + (scores[:, 1:] >= scores[:, :1]).sum(axis=1))
    r = np.concatenate(ranks)
    return RetrievalScore(accuracy_at_1=float(np.mean(r == 1)), mrr=float(np.mean(1.0 / r)),
                          n_queries=int(r.size), corpus_size=C)


class ModelEmbedder:
    """Adapter from a PromptEmbedder to the eval protocol (no tape, plain arrays)."""

    def __init__(self, model):
        self.model = model

    def queries(self, instructions, texts):
        return self.model.embed_queries(instructions, texts).data

    def documents(self, instructions, docs):
        if self.model.cfg.doc_mode == "symmetric":
            return self.model.embed_queries(instructions, docs).data
        return self.model.embed_docs(docs)


def _hash_vec(key: tuple, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(repr(key).encode(), digest_size=8).digest(), "little")
    return np.random.default_rng(seed).standard_normal(dim)


class OracleEmbedder:
    """Embeds a query as the hash of its true answer and a document as its own hash."""

    def __init__(self, family: TaskFamily, dim: int = 64):
        self.family = family
        self.dim = dim
        self._task_of = {t.instruction: t for t in family.tasks}

    def queries(self, instructions, texts):
        return np.stack([_hash_vec(self._task_of[tuple(i)].relation(q), self.dim)
                         for i, q in zip(instructions, texts)])

    def documents(self, instructions, docs):
        return np.stack([_hash_vec(tuple(int(x) for x in d), self.dim) for d in docs])


class RandomEmbedder:
    """Independent Gaussian vectors per distinct text; carries no relation information."""

    def __init__(self, dim: int = 48, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def _vec(self, key) -> np.ndarray:
        return _hash_vec((self.seed, key), self.dim)

    def queries(self, instructions, texts):
        return np.stack([self._vec(("q", tuple(i), tuple(q))) for i, q in zip(instructions, texts)])

    def documents(self, instructions, docs):
        return np.stack([self._vec(("d", tuple(int(x) for x in d))) for d in docs])
