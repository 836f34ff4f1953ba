"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py            # per-kernel table
    python3 benchmarks/bench_kernels.py --steps 20 # plus whole training steps per backend

Kernel timings call both implementations in one process. Training steps run in
a subprocess per backend because PEMB_NUMBA is read at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from pemb import _kernels as K

STEP_SCRIPT = """
import time
from pemb.config import RunConfig
from pemb.data import default_family, gen_dataset
from pemb.model import PromptEmbedder
from pemb.optim import AdamW
from pemb.trainer import train_step
cfg = RunConfig()
data = gen_dataset(0, default_family(), 50)
m = PromptEmbedder.build(cfg)
opt = AdamW(m.trainable())
train_step(m, opt, [data[:8]], 10)  # warm caches and jit
t = time.perf_counter()
for s in range({steps}):
    train_step(m, opt, [data[8 * s % 192:8 * s % 192 + 8]], 10 + s)
print((time.perf_counter() - t) / {steps})
"""


def cases(rng, rows, cols):
    x = rng.standard_normal((rows, cols))
    gain = rng.standard_normal(cols)
    valid = rng.integers(1, cols + 1, rows)
    y = K.numpy_kernels.softmax_rows(x, None)
    g = rng.standard_normal((rows, cols))
    _, xhat, rstd = K.numpy_kernels.layernorm_rows(x, gain, 1e-5)
    idx = rng.integers(0, 64, rows)
    return {
        "softmax_rows": lambda k: k.softmax_rows(x, None),
        "softmax_rows(causal)": lambda k: k.softmax_rows(x, valid),
        "softmax_rows_bwd": lambda k: k.softmax_rows_bwd(y, g),
        "layernorm_rows": lambda k: k.layernorm_rows(x, gain, 1e-5),
        "layernorm_rows_bwd": lambda k: k.layernorm_rows_bwd(g, xhat, rstd, gain),
        "scatter_add_rows": lambda k: k.scatter_add_rows(64, idx, g),
        "logsumexp_rows": lambda k: k.logsumexp_rows(x),
    }


def best_of(fn, repeat=5):
    n, _ = timeit.Timer(fn).autorange()
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n


def kernel_table(shapes):
    if K.numba_kernels is None:
        print("numba unavailable or disabled (PEMB_NUMBA=0); nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'shape':>10s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for rows, cols in shapes:
        for name, call in cases(rng, rows, cols).items():
            call(K.numba_kernels)  # compile outside the timer
            t_np = best_of(lambda: call(K.numpy_kernels))
            t_nb = best_of(lambda: call(K.numba_kernels))
            print(f"{name:24s} {f'{rows}x{cols}':>10s} {t_np * 1e6:10.1f} {t_nb * 1e6:10.1f} {t_np / t_nb:8.2f}")


def step_table(steps):
    print(f"\ntraining step, default config, mean of {steps}")
    for flag, label in (("0", "numpy"), ("1", "numba")):
        env = {**os.environ, "PEMB_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True)
        print(f"  {label:6s} {float(out.stdout.strip()) * 1e3:8.2f} ms/step")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=0, help="also time this many training steps per backend")
    args = ap.parse_args()
    kernel_table([(64, 64), (512, 64), (4096, 49)])
    if args.steps:
        step_table(args.steps)


if __name__ == "__main__":
    main()
