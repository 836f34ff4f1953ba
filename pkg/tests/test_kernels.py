import os
import subprocess
import sys

import numpy as np
import pytest

from pemb import _kernels as K

nb = K.numba_kernels
np_k = K.numpy_kernels
needs_numba = pytest.mark.skipif(nb is None, reason="numba path disabled")


@pytest.fixture(params=[np.float32, np.float64], ids=["f32", "f64"])
def dtype(request):
    return request.param


def _tol(dtype):
    return 1e-5 if dtype == np.float32 else 1e-12


@needs_numba
def test_softmax_paths_agree(rng, dtype):
    x = (rng.standard_normal((37, 11)) * 5).astype(dtype)
    valid = rng.integers(1, 12, 37)
    for v in (None, valid):
        np.testing.assert_allclose(nb.softmax_rows(x, v), np_k.softmax_rows(x, v), atol=_tol(dtype))
    y = np_k.softmax_rows(x, None)
    g = rng.standard_normal(x.shape).astype(dtype)
    np.testing.assert_allclose(nb.softmax_rows_bwd(y, g), np_k.softmax_rows_bwd(y, g), atol=_tol(dtype))


@needs_numba
def test_layernorm_paths_agree(rng, dtype):
    x = rng.standard_normal((23, 16)).astype(dtype)
    gain = rng.standard_normal(16).astype(dtype)
    a, b = nb.layernorm_rows(x, gain, 1e-5), np_k.layernorm_rows(x, gain, 1e-5)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u.reshape(v.shape), v, atol=10 * _tol(dtype))
    g = rng.standard_normal(x.shape).astype(dtype)
    _, xhat, rstd = b
    for u, v in zip(nb.layernorm_rows_bwd(g, xhat, rstd, gain), np_k.layernorm_rows_bwd(g, xhat, rstd, gain)):
        np.testing.assert_allclose(u, v, atol=10 * _tol(dtype))


@needs_numba
def test_scatter_and_logsumexp_paths_agree(rng, dtype):
    idx = rng.integers(0, 9, 40)
    g = rng.standard_normal((40, 5)).astype(dtype)
    np.testing.assert_allclose(nb.scatter_add_rows(9, idx, g), np_k.scatter_add_rows(9, idx, g), atol=_tol(dtype))
    x = (rng.standard_normal((13, 7)) * 100).astype(dtype)
    np.testing.assert_allclose(nb.logsumexp_rows(x), np_k.logsumexp_rows(x), rtol=_tol(dtype))


def test_causal_prefix_counts(rng):
    x = rng.standard_normal((4, 4))
    y = np_k.softmax_rows(x, np.array([1, 2, 3, 4]))
    assert y[0, 0] == 1.0 and np.all(y[0, 1:] == 0) and np.all(y[2, 3:] == 0)


def test_env_flag_selects_numpy():
    code = "from pemb import _kernels as K; print(K.BACKEND, K.numba_kernels is None)"
    env = {**os.environ, "PEMB_NUMBA": "0"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "True"]


def test_training_step_identical_across_backends():
    # one scratch step per backend in float64: losses agree to rounding
    code = (
        "import numpy as np\n"
        "from pemb.config import RunConfig\n"
        "from pemb.gradcheck import MICRO\n"
        "from pemb.model import PromptEmbedder\n"
        "from pemb.data import default_family, gen_dataset\n"
        "from pemb.trainer import batch_loss\n"
        "cfg = RunConfig(**MICRO)\n"
        "m = PromptEmbedder.build(cfg, dtype=np.float64)\n"
        "fam = default_family(cfg.n_tasks, cfg.per_class, cfg.vocab_size)\n"
        "print(repr(batch_loss(m, gen_dataset(0, fam, 2)[:2]).item()))\n"
    )
    vals = []
    for flag in ("0", "1"):
        env = {**os.environ, "PEMB_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        vals.append(float(out.stdout.strip()))
    assert abs(vals[0] - vals[1]) < 1e-12
