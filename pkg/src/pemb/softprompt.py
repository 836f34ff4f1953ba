"""Instruction-conditioned soft prompt generation over the prompting LM.

Each step relaxes the next-token choice into a convex mixture of vocabulary
embeddings, appends it to the running input and re-runs the whole sequence.
Nothing is sampled, so the loop is a deterministic, differentiable function of
the parameters and the instruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, LengthError
from .lm import InputSeq, LmParams, LoraAdapter, decode, decode_batch, last_token_pool, lm_head
from .tensor import Tensor

__all__ = [
    "SoftGenState",
    "SoftPromptSeq",
    "encode_instruction",
    "soft_token",
    "generate_prompts",
    "generate_prompts_batch",
]


@dataclass
class SoftGenState:
    tokens: np.ndarray
    g: Tensor
    soft_tokens: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    states: list = field(default_factory=list)


@dataclass
class SoftPromptSeq:
    """Prompt states P [K x d_p] plus the generation trace that produced them."""

    P: Tensor
    trace: SoftGenState | None = None

    @property
    def K(self) -> int:
        return self.P.shape[0]


def _tokens(t) -> np.ndarray:
    arr = np.asarray(t, dtype=np.int64).reshape(-1)
    if arr.size == 0:
        raise ContractError("instruction must contain at least one token")
    return arr


def encode_instruction(params: LmParams, lora: LoraAdapter | None, t) -> Tensor:
    """g0: hidden state of the last instruction token."""
    return last_token_pool(decode(params, InputSeq.of(_tokens(t)), lora))


def soft_token(params: LmParams, g: Tensor, temperature: float = 1.0) -> tuple[Tensor, Tensor]:
    """(alpha, e) with alpha = softmax(phi(g) / temperature) and e = alpha^T E.

    Works row-wise when ``g`` is [B x d].
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    logits = lm_head(params, g)
    if temperature != 1.0:
        logits = T.scale(logits, 1.0 / temperature)
    alpha = T.softmax_lastdim(logits)
    if alpha.ndim == 1:
        e = (alpha.reshape(1, alpha.shape[0]) @ params.E).reshape(params.config.d_model)
    else:
        e = alpha @ params.E
    return alpha, e


def _check_budget(params: LmParams, m: int, K: int) -> None:
    if K < 0:
        raise ContractError(f"K must be >= 0, got {K}")
    if m + K > params.config.max_len:
        raise LengthError(
            f"instruction of {m} tokens plus K={K} soft tokens exceeds max_len {params.config.max_len}")


def generate_prompts(params: LmParams, lora: LoraAdapter | None, t, K: int,
                     temperature: float = 1.0) -> SoftPromptSeq:
    """Run K relaxed generation steps, recomputing the full forward each step."""
    toks = _tokens(t)
    m = toks.size
    _check_budget(params, m, K)
    d = params.config.d_model
    g = encode_instruction(params, lora, toks)
    state = SoftGenState(tokens=toks, g=g)
    for i in range(1, K + 1):
        alpha, e = soft_token(params, state.g, temperature)
        state.alphas.append(alpha)
        state.soft_tokens.append(e)
        E_soft = T.stack(state.soft_tokens)
        H = decode(params, InputSeq.of(toks, E_soft), lora)
        p_i = H[m + i - 1]
        state.states.append(p_i)
        state.g = p_i
    if K == 0:
        return SoftPromptSeq(Tensor(np.zeros((0, d), dtype=params.dtype)), state)
    return SoftPromptSeq(T.stack(state.states), state)


def generate_prompts_batch(params: LmParams, lora: LoraAdapter | None, tokens, K: int,
                           temperature: float = 1.0) -> Tensor:
    """Batched generation for equal-length instructions [B x m] -> P [B x K x d_p].

    Row b equals ``generate_prompts(params, lora, tokens[b], K).P``.
    """
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 2 or toks.shape[1] == 0:
        raise ContractError(f"instruction batch must be [B x m] with m >= 1, got {toks.shape}")
    B, m = toks.shape
    _check_budget(params, m, K)
    d = params.config.d_model
    if K == 0:
        return Tensor(np.zeros((B, 0, d), dtype=params.dtype))
    g = last_token_pool(decode_batch(params, lora=lora, segments=[toks]))
    soft, states = [], []
    for _ in range(K):
        _, e = soft_token(params, g, temperature)
        soft.append(e)
        E_soft = T.stack(soft, axis=1)
        H = decode_batch(params, lora=lora, segments=[toks, E_soft])
        g = H[:, -1, :]
        states.append(g)
    return T.stack(states, axis=1)
