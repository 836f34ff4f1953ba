"""Linear maps from prompt space into an embedding model's input space."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

__all__ = ["ProjMatrix", "AdapterMatrix", "project", "adapt", "trainable_param_count", "lora_param_count"]


class ProjMatrix:
    """W_proj [d_e x d_p], no bias."""

    name = "align.W_proj"

    def __init__(self, W: Tensor):
        if W.ndim != 2:
            raise ShapeError(f"W_proj must be 2-D, got {W.shape}")
        self.W = W
        self.W.name = self.name

    @classmethod
    def init(cls, d_e: int, d_p: int, seed: int = 0, dtype=np.float32, trainable: bool = True):
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((d_e, d_p)) / math.sqrt(d_p)
        return cls(Tensor(W.astype(dtype), requires_grad=trainable))

    @property
    def shape(self):
        return self.W.shape

    @property
    def trainable(self) -> bool:
        return self.W.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.W.requires_grad = bool(flag)
        if not flag:
            self.W.grad = None


class AdapterMatrix(ProjMatrix):
    """W_adp [d_e' x d_e], started at a truncated/zero-padded identity."""

    name = "align.W_adp"

    @classmethod
    def init(cls, d_out: int, d_in: int, seed: int = 0, dtype=np.float32, trainable: bool = True):
        return cls(Tensor(np.eye(d_out, d_in, dtype=dtype), requires_grad=trainable))


def _apply(W: Tensor, P: Tensor, what: str) -> Tensor:
    if P.shape[-1] != W.shape[1]:
        raise ShapeError(f"{what}: matrix {W.shape} cannot map vectors of width {P.shape[-1]}")
    return P @ T.transpose(W)


def project(Wp: ProjMatrix, P: Tensor) -> Tensor:
    """Row-wise W_proj p_i: [.. x K x d_p] -> [.. x K x d_e]."""
    return _apply(Wp.W, P, "project")


def adapt(Wa: AdapterMatrix, Wp: ProjMatrix, P: Tensor) -> Tensor:
    """Row-wise W_adp W_proj p_i: [.. x K x d_p] -> [.. x K x d_e']."""
    if Wa.shape[1] != Wp.shape[0]:
        raise ShapeError(f"adapt: W_adp {Wa.shape} does not chain with W_proj {Wp.shape}")
    return _apply(Wa.W, project(Wp, P), "adapt")


def lora_param_count(n_layers: int, d_p: int, rank: int, n_targets: int = 2) -> int:
    # each square [d_p x d_p] target carries A [r x d_p] and B [d_p x r]
    return n_layers * n_targets * 2 * rank * d_p


def trainable_param_count(mode: str, *, d_p: int, d_e: int, d_e2: int | None = None,
                          n_layers: int = 2, rank: int = 4, n_targets: int = 2,
                          virtual_tokens: int = 20) -> int:
    if mode == "scratch":
        return lora_param_count(n_layers, d_p, rank, n_targets) + d_e * d_p
    if mode == "transfer":
        if d_e2 is None:
            raise ConfigError("transfer mode needs the target width d_e2")
        return d_e2 * d_e
    if mode == "prompt-tuning-baseline":
        return virtual_tokens * d_e
    if mode == "vanilla-eval":
        return 0
    raise ConfigError(f"unknown mode {mode!r}")
