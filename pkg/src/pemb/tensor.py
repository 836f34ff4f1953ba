"""Dense tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` whenever one of their
inputs is tracked (a trainable leaf, or the output of an already recorded op).
Without an active tape, ops run eagerly and record nothing, so evaluation code
needs no special mode.

    >>> w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape():
    ...     loss = (w * w).sum()
    >>> grads = backward(loss)
    >>> grads[w].tolist()
    [2.0, 4.0, 6.0]
"""

from __future__ import annotations

import math
import threading
from collections.abc import Callable, Sequence

import numpy as np

from . import _kernels as K
from .errors import LookupError_, NumericError, ShapeError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "NumericError",
    "ShapeError",
    "TapeError",
    "LookupError_",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "tsum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "gelu",
    "softmax_lastdim",
    "logsumexp_lastdim",
    "layer_norm",
    "concat",
    "concat_rows",
    "stack",
    "gather_rows",
    "index",
]


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class _Node:
    __slots__ = ("out", "parents", "needs", "backward", "op", "tape")

    def __init__(self, out, parents, needs, backward, op, tape):
        self.out = out
        self.parents = parents
        self.needs = needs
        self.backward = backward
        self.op = op
        self.tape = tape


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Recording order is a topological order; :func:`backward` walks it in exact
    reverse. A tape is single-use: ``backward`` consumes it.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.live = True

    def __enter__(self) -> "Tape":
        if not self.live:
            raise TapeError("cannot re-enter a consumed tape")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def discard(self) -> None:
        for node in self.nodes:
            if node.out.node is node:
                node.out.node = None
        self.nodes = []
        self.live = False


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Numeric array plus an optional link into the gradient tape.

    ``requires_grad`` marks a trainable leaf. Only such leaves ever receive a
    ``grad`` buffer.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.node: _Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or (self.node is not None and self.node.tape.live)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


def _emit(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None:
        needs = tuple(p.tracked for p in parents)
        if any(needs):
            node = _Node(out, parents, needs, backward, op, tape)
            tape.nodes.append(node)
            out.node = node
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor, accumulate: bool = True) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) to every trainable leaf on the loss's tape.

    Gradients are added into each leaf's ``grad`` buffer when ``accumulate``
    is true (the buffer is created on first use). Returns the map from leaf to
    the gradient contributed by this call. The tape is consumed.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss.node
    if node is None or not node.tape.live:
        raise TapeError("loss is not attached to a live tape")
    tape = node.tape
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    for nd in reversed(tape.nodes):
        g = pending.pop(id(nd.out), None)
        if g is None:
            continue
        pgrads = nd.backward(g, nd.needs)
        for p, gp, need in zip(nd.parents, pgrads, nd.needs):
            if not need or gp is None:
                continue
            key = id(p)
            if p.node is not None and p.node.tape is tape:
                if key in pending:
                    pending[key] = pending[key] + gp
                else:
                    pending[key] = gp
            elif p.requires_grad:
                if key in leaf_grads:
                    leaf_grads[key] = leaf_grads[key] + gp
                else:
                    leaf_grads[key] = gp
                    leaves[key] = p
    tape.discard()
    result: dict[Tensor, np.ndarray] = {}
    for key, g in leaf_grads.items():
        leaf = leaves[key]
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        if accumulate:
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _emit(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _emit(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def bw(g, needs):
        return (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                _unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return _emit(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g, needs):
        return (_unbroadcast(g / bd, ad.shape) if needs[0] else None,
                _unbroadcast(-g * out / bd, bd.shape) if needs[1] else None)

    return _emit(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g, needs: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _emit(a.data * c, (a,), lambda g, needs: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g, needs: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _emit(out, (a,), lambda g, needs: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g, needs: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g, needs: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere, so FD checks stay clean)."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    u = c * (x + k * x * x * x)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bw(g, needs):
        du = c * (1.0 + 3.0 * k * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _emit(out, (a,), bw, "gelu")


# ---------------------------------------------------------------- reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(ad @ bd, (a, b), bw, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs ndim >= 2, got shape {a.shape}")
        out = np.swapaxes(a.data, -1, -2)
        return _emit(out, (a,), lambda g, needs: (np.swapaxes(g, -1, -2),), "transpose")
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,),
                 lambda g, needs: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: {src} -> {tuple(shape)}") from exc
    return _emit(out, (a,), lambda g, needs: (g.reshape(src),), "reshape")


# ---------------------------------------------------------------- row kernels

def softmax_lastdim(a: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis with max subtraction.

    With ``causal=True`` the last two axes form a square score matrix and
    entry ``[i, j]`` is masked out for ``j > i``.
    """
    shape = a.shape
    n = shape[-1]
    if n < 1:
        raise ShapeError("softmax over an empty axis")
    x2 = np.ascontiguousarray(a.data.reshape(-1, n))
    valid = None
    if causal:
        if a.ndim < 2 or shape[-2] != n:
            raise ShapeError(f"causal softmax needs square trailing axes, got {shape}")
        valid = np.tile(np.arange(1, n + 1, dtype=np.int64), x2.shape[0] // n)
    y2 = K.softmax_rows(x2, valid)

    def bw(g, needs):
        g2 = np.ascontiguousarray(g.reshape(-1, n))
        return (K.softmax_rows_bwd(y2, g2).reshape(shape),)

    return _emit(y2.reshape(shape), (a,), bw, "softmax")


def logsumexp_lastdim(a: Tensor) -> Tensor:
    shape = a.shape
    n = shape[-1]
    x2 = np.ascontiguousarray(a.data.reshape(-1, n))
    out = K.logsumexp_rows(x2)

    def bw(g, needs):
        p = np.exp(x2 - out[:, None])
        return ((p * g.reshape(-1, 1)).reshape(shape),)

    return _emit(out.reshape(shape[:-1]), (a,), bw, "logsumexp")


def layer_norm(a: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Mean/variance normalization of the last axis, times a learned gain."""
    shape = a.shape
    n = shape[-1]
    if gain.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gain.shape} does not match width {n}")
    x2 = np.ascontiguousarray(a.data.reshape(-1, n))
    y2, xhat, rstd = K.layernorm_rows(x2, gain.data, eps)

    def bw(g, needs):
        dx, dgain = K.layernorm_rows_bwd(np.ascontiguousarray(g.reshape(-1, n)), xhat, rstd, gain.data)
        return (dx.reshape(shape) if needs[0] else None, dgain if needs[1] else None)

    return _emit(y2.reshape(shape), (a, gain), bw, "layer_norm")


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g, needs):
        out = []
        for i, need in enumerate(needs):
            if need:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(bounds[i], bounds[i + 1])
                out.append(g[tuple(sl)])
            else:
                out.append(None)
        return tuple(out)

    return _emit(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def concat_rows(*tensors: Tensor) -> Tensor:
    """Join along the row axis (second to last)."""
    if len(tensors) == 1 and not isinstance(tensors[0], Tensor):
        tensors = tuple(tensors[0])
    return concat(tensors, axis=-2)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mixed shapes {sorted(shapes)}")

    def bw(g, needs):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] if need else None for i, need in enumerate(needs))

    return _emit(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def gather_rows(table: Tensor, idx) -> Tensor:
    """Rows ``idx`` of a 2-D table; the gradient scatter-adds back into it."""
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got {table.shape}")
    n_rows, width = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        bad = idx[(idx < 0) | (idx >= n_rows)][0]
        raise LookupError_(f"row index {int(bad)} out of range for table with {n_rows} rows")
    flat = idx.reshape(-1)

    def bw(g, needs):
        g2 = np.ascontiguousarray(g.reshape(-1, width))
        return (K.scatter_add_rows(n_rows, flat, g2),)

    return _emit(table.data[idx], (table,), bw, "gather_rows")


def index(a: Tensor, key) -> Tensor:
    """Numpy-style indexing; the gradient is scattered with ``np.add.at``."""
    if isinstance(key, Tensor):
        raise TypeError("index with a Tensor key is not supported")
    shape, dtype = a.shape, a.dtype
    out = np.array(a.data[key], copy=True)

    basic = all(k is Ellipsis or isinstance(k, (int, slice, np.integer))
                for k in (key if isinstance(key, tuple) else (key,)))

    def bw(g, needs):
        z = np.zeros(shape, dtype=dtype)
        if basic:
            z[key] += g
        else:
            np.add.at(z, key, g)
        return (z,)

    return _emit(out, (a,), bw, "index")
