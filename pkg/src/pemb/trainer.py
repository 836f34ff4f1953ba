"""Training loops per mode, including the static prompt-tuning baseline."""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .contrastive import TrainingTriplet, candidate_index, info_nce
from .data import EvalItem, default_family, gen_dataset, gen_eval_set
from .embed import cosine_matrix
from .errors import ConfigError, ContractError, DimMismatchError, NumericError
from .evaluate import ModelEmbedder, eval_retrieval
from .model import PromptEmbedder
from .optim import AdamW, lr_at
from .tensor import Tensor

__all__ = [
    "RunResult",
    "batch_loss",
    "train_step",
    "train",
    "run_scratch",
    "run_transfer",
    "run_prompt_tuning_baseline",
    "save_model",
    "load_model",
    "heldout_triplets",
    "eval_items_for",
    "ablate_k",
    "write_ablation_csv",
]

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    model: PromptEmbedder
    records: list[dict] = field(default_factory=list)
    steps_to_threshold: int | None = None
    final: dict | None = None
    n_trainable: int = 0

    @property
    def best_accuracy(self) -> float:
        return max(r["accuracy_at_1"] for r in self.records)

    def reached(self, threshold: float) -> int | None:
        for r in self.records:
            if r["accuracy_at_1"] >= threshold:
                return r["step"]
        return None


# ------------------------------------------------------------------ loss

def _similarities(model: PromptEmbedder, batch: Sequence[TrainingTriplet]) -> Tensor:
    n = len(batch)
    instr = [b.instruction for b in batch]
    vq = model.embed_queries(instr, [b.query for b in batch])
    D = model.doc_embeddings(instr + instr, [b.positive for b in batch] + [b.negative for b in batch])
    S = cosine_matrix(vq, D)
    return S[np.arange(n)[:, None], candidate_index(n)]


def batch_loss(model: PromptEmbedder, batch: Sequence[TrainingTriplet]) -> Tensor:
    if not batch:
        raise ContractError("empty batch")
    return info_nce(_similarities(model, batch), model.cfg.tau)


def _dump_similarities(model, batch, dump_dir) -> str:
    try:
        sims = _similarities(model, batch).data.tolist()
    except (NumericError, FloatingPointError) as exc:
        sims = f"similarities not computable: {exc}"
    path = Path(dump_dir or ".") / "nan_dump.json"
    path.write_text(json.dumps({"similarities": sims,
                                "queries": [list(b.query) for b in batch]}) + "\n")
    return str(path)


def _audit(model: PromptEmbedder) -> None:
    mask = model.freeze_mask()
    got = {n for n, t in model.named_tensors() if t.grad is not None}
    if not got <= mask.trainable:
        raise ContractError(f"gradient buffers on frozen tensors: {sorted(got - mask.trainable)}")
    if got and got != mask.trainable:
        raise ContractError(f"trainable tensors without gradients: {sorted(mask.trainable - got)}")


def train_step(model: PromptEmbedder, opt: AdamW, micro_batches: Sequence[Sequence[TrainingTriplet]],
               step: int, dump_dir=None) -> float:
    """One optimizer update from the mean gradient of ``micro_batches``."""
    A = len(micro_batches)
    total = 0.0
    for mb in micro_batches:
        try:
            with T.Tape():
                loss = batch_loss(model, mb)
                if not np.isfinite(loss.item()):
                    raise NumericError("non-finite loss")
                if opt.params:
                    T.backward(T.scale(loss, 1.0 / A))
        except NumericError as exc:
            where = _dump_similarities(model, mb, dump_dir)
            raise NumericError(f"step {step}: {exc}; similarity matrix written to {where}") from exc
        total += loss.item()
    _audit(model)
    if opt.params:
        opt.step(lr_at(step, model.cfg))
        opt.zero_grad()
    return total / A


# ------------------------------------------------------------------ loop

def heldout_triplets(cfg: RunConfig, n: int = 64) -> list[TrainingTriplet]:
    fam = default_family(cfg.n_tasks, cfg.per_class, cfg.vocab_size)
    per = max(1, n // fam.n_tasks)
    return gen_dataset(cfg.eval_seed + 1, fam, per)


def eval_items_for(cfg: RunConfig) -> list[EvalItem]:
    fam = default_family(cfg.n_tasks, cfg.per_class, cfg.vocab_size)
    return gen_eval_set(cfg.eval_seed, fam, cfg.eval_queries, cfg.corpus_size)


def _heldout_loss(model, held: Sequence[TrainingTriplet]) -> float:
    n = model.cfg.batch_size
    chunks = [held[i:i + n] for i in range(0, len(held) - n + 1, n)] or [held]
    return float(np.mean([batch_loss(model, c).item() for c in chunks]))


def _batches(cfg: RunConfig, data: Sequence[TrainingTriplet]):
    """Endless stream of micro-batches; each pass over the data is a fresh permutation."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.batch_size
    if len(data) < n:
        raise ConfigError(f"batch size {n} exceeds dataset size {len(data)}")
    while True:
        perm = rng.permutation(len(data))
        for s in range(0, len(data) - n + 1, n):
            yield [data[i] for i in perm[s:s + n]]


def train(model: PromptEmbedder, data: Sequence[TrainingTriplet], eval_items: Sequence[EvalItem] | None = None,
          metrics_path=None, held: Sequence[TrainingTriplet] | None = None, dump_dir=None) -> RunResult:
    cfg = model.cfg
    eval_items = eval_items if eval_items is not None else eval_items_for(cfg)
    held = held if held is not None else heldout_triplets(cfg)
    opt = AdamW(model.trainable(), betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay)
    res = RunResult(model, n_trainable=model.n_trainable())
    chash = cfg.hash().hex()
    optim_info = {"name": "adamw", "lr": cfg.lr, "betas": [cfg.beta1, cfg.beta2], "eps": cfg.adam_eps,
                  "weight_decay": cfg.weight_decay, "warmup": cfg.warmup, "schedule": cfg.schedule}
    t0 = time.perf_counter()
    out = open(metrics_path, "w", encoding="utf-8", newline="\n") if metrics_path else None
    stream = _batches(cfg, data)
    window: list[float] = []

    def record(step: int) -> dict:
        score = eval_retrieval(ModelEmbedder(model), eval_items)
        rec = {
            "step": step,
            "loss": _heldout_loss(model, held),
            "train_loss": float(np.mean(window)) if window else None,
            "accuracy_at_1": score.accuracy,
            "mrr": score.mrr,
            "mode": cfg.mode,
            "config_hash": chash,
            "optimizer": optim_info,
            "wall_time": round(time.perf_counter() - t0, 3) if cfg.record_wall_time else None,
        }
        window.clear()
        res.records.append(rec)
        if out:
            out.write(json.dumps(rec, separators=(",", ":")) + "\n")
            out.flush()
        log.info("step %d loss %.4f acc@1 %.4f mrr %.4f", step, rec["loss"], rec["accuracy_at_1"], rec["mrr"])
        if res.steps_to_threshold is None and rec["accuracy_at_1"] >= cfg.threshold:
            res.steps_to_threshold = step
        return rec

    try:
        record(0)
        for step in range(cfg.total_steps):
            micro = [next(stream) for _ in range(cfg.accum_steps)]
            window.append(train_step(model, opt, micro, step, dump_dir))
            done = step + 1
            if done % cfg.eval_every == 0 or done == cfg.total_steps:
                record(done)
                if cfg.stop_at_threshold and res.steps_to_threshold is not None:
                    break
    finally:
        if out:
            out.close()
    res.final = res.records[-1]
    return res


# ------------------------------------------------------------------ persistence

def save_model(path, model: PromptEmbedder) -> None:
    save_checkpoint(path, {n: t.data for n, t in model.named_tensors()}, model.cfg.hash())


def load_model(path, cfg: RunConfig, model: PromptEmbedder | None = None) -> PromptEmbedder:
    """Restore tensors into ``model`` (built from ``cfg`` if omitted)."""
    if model is None:
        if cfg.mode == "transfer":
            src = PromptEmbedder.build(cfg.replace(mode="scratch"))
            model = src.to_transfer(cfg)
        else:
            model = PromptEmbedder.build(cfg)
    tmap = model.tensor_map()
    ck = load_checkpoint(path, {n: t.shape for n, t in tmap.items()}, cfg.hash())
    for n, t in tmap.items():
        t.data = ck.tensors[n].astype(t.dtype)
    model.clear_cache()
    return model


# ------------------------------------------------------------------ modes

def _prep(cfg: RunConfig, data):
    if data is None:
        fam = default_family(cfg.n_tasks, cfg.per_class, cfg.vocab_size)
        data = gen_dataset(cfg.data_seed, fam, cfg.per_task)
    return data


def run_scratch(cfg: RunConfig, data=None, *, checkpoint_path=None, metrics_path=None,
                backbone: str = "backbone", eval_items=None) -> RunResult:
    """Train LoRA(psi_p) and W_proj against a frozen backbone.

    ``backbone="target"`` trains from scratch on the transfer backbone instead.
    """
    cfg = cfg.replace(mode="scratch")
    if backbone == "target":
        cfg = cfg.replace(d_e=cfg.d_e2, backbone_seed=cfg.target_seed)
    model = PromptEmbedder.build(cfg)
    res = train(model, _prep(cfg, data), eval_items, metrics_path,
                dump_dir=Path(checkpoint_path).parent if checkpoint_path else None)
    if checkpoint_path:
        save_model(checkpoint_path, model)
    return res


def run_transfer(cfg: RunConfig, source, data=None, *, checkpoint_path=None, metrics_path=None,
                 eval_items=None) -> RunResult:
    """Train only W_adp, mapping a trained source onto a fresh backbone of width d_e2.

    ``source`` is a PromptEmbedder or a path to a scratch checkpoint.
    """
    cfg = cfg.replace(mode="transfer")
    if not isinstance(source, PromptEmbedder):
        try:
            source = load_model(source, cfg.replace(mode="scratch"))
        except DimMismatchError as exc:
            raise ConfigError(f"source checkpoint does not match the config: {exc}") from exc
    model = source.to_transfer(cfg)
    res = train(model, _prep(cfg, data), eval_items, metrics_path,
                dump_dir=Path(checkpoint_path).parent if checkpoint_path else None)
    if checkpoint_path:
        save_model(checkpoint_path, model)
    return res


def run_prompt_tuning_baseline(cfg: RunConfig, data=None, *, checkpoint_path=None, metrics_path=None,
                               eval_items=None) -> RunResult:
    """Train one static [virtual_tokens x d_e] matrix placed in the prompt slot."""
    cfg = cfg.replace(mode="prompt-tuning-baseline")
    model = PromptEmbedder.build(cfg)
    res = train(model, _prep(cfg, data), eval_items, metrics_path,
                dump_dir=Path(checkpoint_path).parent if checkpoint_path else None)
    if checkpoint_path:
        save_model(checkpoint_path, model)
    return res


# ------------------------------------------------------------------ ablation

ABLATION_HEADER = ("k", "accuracy_at_1", "mrr", "steps")


def ablate_k(cfg: RunConfig, ks: Sequence[int], data=None, eval_items=None) -> list[dict]:
    """Scratch training per k on shared data and seeds, rows sorted by k.

    k=0 has no prompt slot and nothing to train, so its row is the vanilla
    backbone's score with zero optimizer steps.
    """
    data = _prep(cfg, data)
    eval_items = eval_items if eval_items is not None else eval_items_for(cfg)
    rows = []
    for k in sorted(set(int(k) for k in ks)):
        if k < 0:
            raise ConfigError(f"k must be >= 0, got {k}")
        if k == 0:
            model = PromptEmbedder.build(cfg.replace(mode="vanilla-eval", k=0))
            score = eval_retrieval(ModelEmbedder(model), eval_items)
            rows.append({"k": 0, "accuracy_at_1": score.accuracy, "mrr": score.mrr, "steps": 0})
            continue
        res = run_scratch(cfg.replace(k=k), data, eval_items=eval_items)
        rows.append({"k": k, "accuracy_at_1": res.final["accuracy_at_1"], "mrr": res.final["mrr"],
                     "steps": res.final["step"]})
    return rows


def write_ablation_csv(path, rows: Sequence[dict]) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r["k"], f"{r['accuracy_at_1']:.6f}", f"{r['mrr']:.6f}", r["steps"]])
