"""Row-wise numeric kernels used by the tensor ops.

Every kernel exists twice: a pure-numpy version and a numba ``@njit`` version.
``PEMB_NUMBA=0`` in the environment forces the numpy path; otherwise numba is
used when it imports. Both paths take and return C-contiguous 2-D arrays.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "softmax_rows",
    "softmax_rows_bwd",
    "layernorm_rows",
    "layernorm_rows_bwd",
    "scatter_add_rows",
    "logsumexp_rows",
    "numpy_kernels",
    "numba_kernels",
]


# ---------------------------------------------------------------- numpy path

def _np_softmax_rows(x, valid):
    if valid is None:
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    cols = np.arange(x.shape[1])
    keep = cols[None, :] < valid[:, None]
    z = np.where(keep, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0).astype(x.dtype, copy=False)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_rows_bwd(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def _np_layernorm_rows(x, gain, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain, xhat, rstd[:, 0]


def _np_layernorm_rows_bwd(g, xhat, rstd, gain):
    n = xhat.shape[1]
    dgain = (g * xhat).sum(axis=0)
    gx = g * gain
    dx = (gx - gx.mean(axis=1, keepdims=True)
          - xhat * (gx * xhat).sum(axis=1, keepdims=True) / n) * rstd[:, None]
    return dx, dgain


def _np_scatter_add_rows(n_rows, idx, g):
    out = np.zeros((n_rows, g.shape[1]), dtype=g.dtype)
    np.add.at(out, idx, g)
    return out


def _np_logsumexp_rows(x):
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


class numpy_kernels:  # noqa: N801 - used as a namespace
    softmax_rows = staticmethod(_np_softmax_rows)
    softmax_rows_bwd = staticmethod(_np_softmax_rows_bwd)
    layernorm_rows = staticmethod(_np_layernorm_rows)
    layernorm_rows_bwd = staticmethod(_np_layernorm_rows_bwd)
    scatter_add_rows = staticmethod(_np_scatter_add_rows)
    logsumexp_rows = staticmethod(_np_logsumexp_rows)


# ---------------------------------------------------------------- numba path

numba_kernels = None

if os.environ.get("PEMB_NUMBA", "1") != "0":
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is optional
        njit = None

    if njit is not None:

        @njit(cache=True)
        def _nb_softmax_full(x):
            r, n = x.shape
            out = np.empty_like(x)
            for i in range(r):
                m = x[i, 0]
                for j in range(1, n):
                    if x[i, j] > m:
                        m = x[i, j]
                s = 0.0
                for j in range(n):
                    v = np.exp(x[i, j] - m)
                    out[i, j] = v
                    s += v
                for j in range(n):
                    out[i, j] /= s
            return out

        @njit(cache=True)
        def _nb_softmax_valid(x, valid):
            r, n = x.shape
            out = np.zeros_like(x)
            for i in range(r):
                k = valid[i]
                m = x[i, 0]
                for j in range(1, k):
                    if x[i, j] > m:
                        m = x[i, j]
                s = 0.0
                for j in range(k):
                    v = np.exp(x[i, j] - m)
                    out[i, j] = v
                    s += v
                for j in range(k):
                    out[i, j] /= s
            return out

        @njit(cache=True)
        def _nb_softmax_rows_bwd(y, g):
            r, n = y.shape
            out = np.empty_like(y)
            for i in range(r):
                s = 0.0
                for j in range(n):
                    s += g[i, j] * y[i, j]
                for j in range(n):
                    out[i, j] = y[i, j] * (g[i, j] - s)
            return out

        @njit(cache=True)
        def _nb_layernorm_rows(x, gain, eps):
            r, n = x.shape
            y = np.empty_like(x)
            xhat = np.empty_like(x)
            rstd = np.empty(r, dtype=x.dtype)
            for i in range(r):
                mu = 0.0
                for j in range(n):
                    mu += x[i, j]
                mu /= n
                var = 0.0
                for j in range(n):
                    d = x[i, j] - mu
                    var += d * d
                var /= n
                rs = 1.0 / np.sqrt(var + eps)
                rstd[i] = rs
                for j in range(n):
                    h = (x[i, j] - mu) * rs
                    xhat[i, j] = h
                    y[i, j] = h * gain[j]
            return y, xhat, rstd

        @njit(cache=True)
        def _nb_layernorm_rows_bwd(g, xhat, rstd, gain):
            r, n = g.shape
            dx = np.empty_like(g)
            dgain = np.zeros(n, dtype=g.dtype)
            for i in range(r):
                s1 = 0.0
                s2 = 0.0
                for j in range(n):
                    gx = g[i, j] * gain[j]
                    s1 += gx
                    s2 += gx * xhat[i, j]
                    dgain[j] += g[i, j] * xhat[i, j]
                s1 /= n
                s2 /= n
                for j in range(n):
                    gx = g[i, j] * gain[j]
                    dx[i, j] = (gx - s1 - xhat[i, j] * s2) * rstd[i]
            return dx, dgain

        @njit(cache=True)
        def _nb_scatter_add_rows(n_rows, idx, g):
            out = np.zeros((n_rows, g.shape[1]), dtype=g.dtype)
            for i in range(idx.shape[0]):
                row = idx[i]
                for j in range(g.shape[1]):
                    out[row, j] += g[i, j]
            return out

        @njit(cache=True)
        def _nb_logsumexp_rows(x):
            r, n = x.shape
            out = np.empty(r, dtype=x.dtype)
            for i in range(r):
                m = x[i, 0]
                for j in range(1, n):
                    if x[i, j] > m:
                        m = x[i, j]
                s = 0.0
                for j in range(n):
                    s += np.exp(x[i, j] - m)
                out[i] = m + np.log(s)
            return out

        def _nb_softmax_rows(x, valid):
            if valid is None:
                return _nb_softmax_full(x)
            return _nb_softmax_valid(x, valid)

        def _nb_layernorm(x, gain, eps):
            return _nb_layernorm_rows(x, gain, x.dtype.type(eps))

        class numba_kernels:  # noqa: N801
            softmax_rows = staticmethod(_nb_softmax_rows)
            softmax_rows_bwd = staticmethod(_nb_softmax_rows_bwd)
            layernorm_rows = staticmethod(_nb_layernorm)
            layernorm_rows_bwd = staticmethod(_nb_layernorm_rows_bwd)
            scatter_add_rows = staticmethod(_nb_scatter_add_rows)
            logsumexp_rows = staticmethod(_nb_logsumexp_rows)


_active = numba_kernels if numba_kernels is not None else numpy_kernels
BACKEND = "numba" if numba_kernels is not None else "numpy"

softmax_rows = _active.softmax_rows
softmax_rows_bwd = _active.softmax_rows_bwd
layernorm_rows = _active.layernorm_rows
layernorm_rows_bwd = _active.layernorm_rows_bwd
scatter_add_rows = _active.scatter_add_rows
logsumexp_rows = _active.logsumexp_rows
