"""Central finite-difference check of the full pipeline gradient in float64."""

from __future__ import annotations

import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import default_family, gen_dataset
from .model import PromptEmbedder
from .tensor import Tensor

__all__ = ["MICRO", "GradcheckReport", "rel_error", "fd_gradients", "check_gradients", "gradcheck_pipeline"]

# small enough to perturb every trainable scalar in a few seconds
MICRO = dict(vocab_size=16, d_p=8, d_e=12, d_e2=10, n_layers=2, n_heads=2, d_ff=16, max_len=16,
             lora_rank=2, lora_alpha=4.0, k=3, batch_size=2, n_tasks=2, per_class=2)

# Denominator floor: entries whose true gradient is below this are compared
# in absolute terms, where float64 central differences are still accurate.
REL_FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def fd_gradients(f: Callable[[], float], tensors: Sequence[Tensor], h: float = 1e-4) -> list[np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``tensors``."""
    out = []
    for t in tensors:
        g = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gf[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def check_gradients(f: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-4) -> list[np.ndarray]:
    """Relative error per tensor between backprop and central differences."""
    for t in tensors:
        t.grad = None
    with T.Tape():
        T.backward(f())
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = fd_gradients(lambda: f().item(), tensors, h)
    for t in tensors:
        t.grad = None
    return [rel_error(a, n) for a, n in zip(analytic, numeric)]


@dataclass
class GradcheckReport:
    max_rel_error: float
    n_scalars: int
    per_tensor: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self) -> str:
        return max(self.per_tensor, key=self.per_tensor.get)


def gradcheck_pipeline(seed: int = 0, h: float = 1e-4, tolerance: float = 1e-4, **overrides) -> GradcheckReport:
    """Loss from instruction to InfoNCE, checked on every LoRA and W_proj scalar.

    LoRA B factors start at zero, where the A gradient vanishes identically; the
    check moves them to a random point so every scalar carries signal.
    """
    t0 = time.perf_counter()
    cfg = RunConfig(**{**MICRO, "seed": seed, **overrides})
    model = PromptEmbedder.build(cfg, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for _, B in model.lora.factors.values():
        B.data[:] = rng.standard_normal(B.shape) * 0.5
    fam = default_family(cfg.n_tasks, cfg.per_class, cfg.vocab_size)
    data = gen_dataset(seed, fam, per_task=cfg.batch_size)
    # one query per task so prompts for distinct instructions are exercised
    batch = [next(tr for tr in data if tr.task == t % fam.n_tasks) for t in range(cfg.batch_size)]

    from .trainer import batch_loss

    names = [n for n, _ in model.named_tensors() if n in model.freeze_mask()]
    tmap = model.tensor_map()
    tensors = [tmap[n] for n in names]
    errs = check_gradients(lambda: batch_loss(model, batch), tensors, h)
    per = {n: float(e.max()) for n, e in zip(names, errs)}
    return GradcheckReport(max(per.values()), sum(t.size for t in tensors), per,
                           time.perf_counter() - t0, tolerance)
