"""The full embedder: prompting LM + alignment + frozen embedding LM.

One object covers every training mode. Modes differ in which tensors exist
and which of them train; the prompt slot is filled to match.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from . import tensor as T
from .align import AdapterMatrix, ProjMatrix, adapt, project
from .config import RunConfig
from .embed import EOS, embed_batch, embed_documents
from .errors import ConfigError, ShapeError
from .lm import LmParams, LoraAdapter, init_lm
from .softprompt import generate_prompts_batch
from .tensor import Tensor

__all__ = ["PromptEmbedder", "FreezeMask"]


class FreezeMask:
    """Names of the tensors allowed to receive gradients in a mode."""

    def __init__(self, trainable: Sequence[str], all_names: Sequence[str]):
        self.trainable = frozenset(trainable)
        self.all_names = tuple(all_names)
        unknown = self.trainable - set(self.all_names)
        if unknown:
            raise ConfigError(f"freeze mask names unknown tensors: {sorted(unknown)}")

    def __contains__(self, name: str) -> bool:
        return name in self.trainable

    def items(self):
        return ((n, n in self.trainable) for n in self.all_names)


def _group_rows(keys: Sequence[tuple]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(len(k), []).append(i)
    return groups


class PromptEmbedder:
    def __init__(self, cfg: RunConfig, psi_p: LmParams | None, lora: LoraAdapter | None,
                 proj: ProjMatrix | None, psi_e: LmParams, adapter: AdapterMatrix | None = None,
                 virtual: Tensor | None = None):
        self.cfg = cfg
        self.psi_p = psi_p
        self.lora = lora
        self.proj = proj
        self.psi_e = psi_e
        self.adapter = adapter
        self.virtual = virtual
        self._doc_cache: dict[tuple[int, ...], np.ndarray] = {}

    # ------------------------------------------------------------ builders

    @classmethod
    def build(cls, cfg: RunConfig, dtype=np.float32, backbone: str = "backbone") -> "PromptEmbedder":
        """Fresh system for ``cfg.mode`` other than transfer."""
        psi_e = init_lm(cfg.lm_config(backbone), dtype=dtype)
        d_e = psi_e.config.d_model
        if cfg.mode == "transfer":
            raise ConfigError("transfer systems are built from a source checkpoint")
        if cfg.mode == "prompt-tuning-baseline":
            rng = np.random.default_rng(cfg.seed)
            rows = rng.integers(0, cfg.vocab_size, cfg.virtual_tokens)
            virtual = Tensor(psi_e.E.data[rows].copy(), requires_grad=True, name="prompt_tuning.virtual")
            model = cls(cfg, None, None, None, psi_e, virtual=virtual)
            model.apply_mask()
            return model
        psi_p = init_lm(cfg.lm_config("prompt"), dtype=dtype)
        lora = LoraAdapter.create(psi_p, cfg.lora_rank, cfg.lora_alpha, seed=cfg.seed, dtype=dtype)
        proj = ProjMatrix.init(d_e, cfg.d_p, seed=cfg.seed + 7919, dtype=dtype)
        model = cls(cfg, psi_p, lora, proj, psi_e)
        model.apply_mask()
        return model

    def to_transfer(self, cfg: RunConfig, dtype=np.float32) -> "PromptEmbedder":
        """Port trained LoRA + W_proj onto a fresh backbone; only W_adp trains."""
        if self.psi_p is None or self.proj is None:
            raise ConfigError("transfer needs a source with a prompting LM and W_proj")
        if self.proj.shape != (cfg.d_e, cfg.d_p):
            raise ConfigError(f"source W_proj is {self.proj.shape}, config expects {(cfg.d_e, cfg.d_p)}")
        target = init_lm(cfg.lm_config("target"), dtype=dtype)
        adapter = AdapterMatrix.init(cfg.d_e2, cfg.d_e, dtype=dtype)
        out = PromptEmbedder(cfg, self.psi_p, self.lora, self.proj, target, adapter=adapter)
        out.apply_mask()
        return out

    # ------------------------------------------------------------ tensors

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        if self.psi_p is not None:
            out += [(f"psi_p.{n}", t) for n, t in self.psi_p.named_tensors()]
        if self.lora is not None:
            out += [(f"psi_p.{n}", t) for n, t in self.lora.named_tensors()]
        if self.proj is not None:
            out.append((ProjMatrix.name, self.proj.W))
        if self.adapter is not None:
            out.append((AdapterMatrix.name, self.adapter.W))
            out += [(f"psi_e2.{n}", t) for n, t in self.psi_e.named_tensors()]
        else:
            out += [(f"psi_e.{n}", t) for n, t in self.psi_e.named_tensors()]
        if self.virtual is not None:
            out.append(("prompt_tuning.virtual", self.virtual))
        return out

    def tensor_map(self) -> dict[str, Tensor]:
        return dict(self.named_tensors())

    def freeze_mask(self) -> FreezeMask:
        names = [n for n, _ in self.named_tensors()]
        mode = self.cfg.mode
        if mode == "scratch":
            train = [n for n in names if n.startswith("psi_p.lora.")] + [ProjMatrix.name]
        elif mode == "transfer":
            train = [AdapterMatrix.name]
        elif mode == "prompt-tuning-baseline":
            train = ["prompt_tuning.virtual"]
        else:
            train = []
        return FreezeMask(train, names)

    def apply_mask(self) -> FreezeMask:
        mask = self.freeze_mask()
        for name, t in self.named_tensors():
            t.requires_grad = name in mask
            if name not in mask:
                t.grad = None
        return mask

    def trainable(self) -> list[Tensor]:
        mask = self.freeze_mask()
        return [t for n, t in self.named_tensors() if n in mask]

    def n_trainable(self) -> int:
        return sum(t.size for t in self.trainable())

    @property
    def k(self) -> int:
        if self.virtual is not None:
            return self.virtual.shape[0]
        return self.cfg.k

    # ------------------------------------------------------------ forward

    def aligned_prompts(self, instructions: Sequence[Sequence[int]]) -> Tensor | None:
        """P~ (or P~') per row: [B x K x width], or None when K is 0."""
        B = len(instructions)
        if self.virtual is not None:
            if self.virtual.shape[0] == 0:
                return None
            V = self.virtual
            return T.stack([V] * B) if B > 1 else V.reshape(1, *V.shape)
        if self.cfg.k == 0:
            return None
        keys = [tuple(int(x) for x in t) for t in instructions]
        uniq = sorted(set(keys))
        where = {u: i for i, u in enumerate(uniq)}
        blocks = []
        for m, idx in sorted(_group_rows(uniq).items()):
            toks = np.array([uniq[i] for i in idx], dtype=np.int64)
            blocks.append((idx, generate_prompts_batch(self.psi_p, self.lora, toks, self.cfg.k,
                                                       self.cfg.temperature)))
        if len(blocks) == 1:
            P_u = blocks[0][1]
            order = np.array(blocks[0][0])
        else:
            P_u = T.concat([b for _, b in blocks], axis=0)
            order = np.concatenate([np.array(i) for i, _ in blocks])
        rank = np.empty(len(uniq), dtype=np.int64)
        rank[order] = np.arange(len(uniq))
        rows = rank[[where[k] for k in keys]]
        if len(uniq) == 1 and B == 1:
            P = P_u
        else:
            P = P_u[rows]
        if self.adapter is not None:
            return adapt(self.adapter, self.proj, P)
        return project(self.proj, P)

    def embed_queries(self, instructions: Sequence[Sequence[int]], texts: Sequence[Sequence[int]]) -> Tensor:
        """Instruction-conditioned embeddings [B x d] in input order."""
        B = len(texts)
        if len(instructions) != B:
            raise ShapeError("instructions and texts differ in count")
        P = self.aligned_prompts(instructions)
        groups: dict[tuple[int, int], list[int]] = {}
        for i in range(B):
            groups.setdefault((len(instructions[i]), len(texts[i])), []).append(i)
        parts, order = [], []
        for key in sorted(groups):
            idx = groups[key]
            t = np.array([instructions[i] for i in idx], dtype=np.int64).reshape(len(idx), key[0])
            X = np.array([texts[i] for i in idx], dtype=np.int64).reshape(len(idx), key[1])
            Pg = None
            if P is not None:
                Pg = P if len(groups) == 1 else P[np.array(idx)]
            parts.append(embed_batch(self.psi_e, t, Pg, X, EOS))
            order += idx
        if len(parts) == 1:
            return parts[0]
        out = T.concat(parts, axis=0)
        inv = np.empty(B, dtype=np.int64)
        inv[np.array(order)] = np.arange(B)
        return out[inv]

    def embed_docs(self, docs: Sequence[Sequence[int]]) -> np.ndarray:
        """Constant document embeddings (empty instruction, no prompts), cached."""
        keys = [tuple(int(x) for x in d) for d in docs]
        missing = sorted({k for k in keys if k not in self._doc_cache})
        if missing:
            vecs = embed_documents(self.psi_e, missing)
            for k, v in zip(missing, vecs):
                self._doc_cache[k] = v
        return np.stack([self._doc_cache[k] for k in keys])

    def doc_embeddings(self, instructions, docs) -> Tensor:
        """Documents as the trainer sees them under ``cfg.doc_mode``."""
        if self.cfg.doc_mode == "symmetric":
            return self.embed_queries(instructions, docs)
        return Tensor(self.embed_docs(docs))

    def clear_cache(self) -> None:
        self._doc_cache.clear()
