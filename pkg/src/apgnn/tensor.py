"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op appends its output to the active thread-local tape
in creation order, which is already a topological order.  ``backward``
replays the tape once in reverse and then clears it.

Broadcasting is deliberately narrow.  Two operands may differ only by
missing leading (batch) axes, or by a size-1 axis in the row position
(axis -2).  Everything else raises :class:`ShapeError`.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from . import _accel
from .errors import ContractError, NumericError, ShapeError

_DTYPES = {32: np.float32, 64: np.float64}


class _State(threading.local):
    def __init__(self):
        self.tape: list[Tensor] = []
        self.grad_enabled = True
        self.dtype = np.float32


_state = _State()


def set_precision(bits: int) -> None:
    if bits not in _DTYPES:
        raise ContractError(f"precision must be 32 or 64, got {bits}")
    _state.dtype = _DTYPES[bits]


def get_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(bits: int):
    old = _state.dtype
    set_precision(bits)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


def tape() -> list["Tensor"]:
    return _state.tape


def clear_tape() -> None:
    _state.tape.clear()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_op", "_parents", "_backward")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to the reflected Tensor op

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f" or arr.dtype != _state.dtype:
            arr = arr.astype(_state.dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by constants")
        return mul(self, 1.0 / np.asarray(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return sum_(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)


def _raise_item(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, like: "Tensor | None" = None) -> Tensor:
    """Wrap a constant; it takes the dtype of ``like`` when given."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=None if like is None else like.dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def _result(data, parents: Sequence[Tensor], op: str, backward: Callable) -> Tensor:
    needs = _state.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    out._op = op
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        _state.tape.append(out)
    return out


# ------------------------------------------------------------ broadcasting


def _check_broadcast(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    n = min(len(a), len(b))
    out_tail = []
    for k in range(1, n + 1):
        da, db = a[-k], b[-k]
        if da == db:
            out_tail.append(da)
        elif k == 2 and (da == 1 or db == 1):
            out_tail.append(max(da, db))
        else:
            raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}")
    longer = a if len(a) > len(b) else b
    return tuple(longer[: len(longer) - n]) + tuple(reversed(out_tail))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------- elementwise ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), "mul", bw)


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        return (g * y * (1.0 - y),)

    return _result(y, (x,), "sigmoid", bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _result(y, (x,), "tanh", bw)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    y = np.where(pos, x.data, 0).astype(x.dtype, copy=False)

    def bw(g):
        return (g * pos,)

    return _result(y, (x,), "relu", bw)


def log(x: Tensor, clamp: float = 1e-12) -> Tensor:
    """Natural log of ``max(x, clamp)``; no gradient flows through clamped entries."""
    live = x.data > clamp
    y = np.log(np.where(live, x.data, clamp))

    def bw(g):
        return (np.where(live, g / np.where(live, x.data, 1.0), 0.0),)

    return _result(y, (x,), "log", bw)


def max_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Column-wise maximum over the row axis (-2).

    ``x`` is (..., L, d); ``mask`` (..., L) excludes rows.  The gradient goes
    to the first maximal row.  Groups with no valid rows produce zeros.
    """
    if x.ndim < 2:
        raise ShapeError(f"max_rows needs at least 2 dims, got {x.shape}")
    *lead, L, d = x.shape
    g = int(np.prod(lead)) if lead else 1
    x3 = np.ascontiguousarray(x.data.reshape(g, L, d))
    if mask is None:
        m2 = np.ones((g, L), dtype=np.bool_)
    else:
        if tuple(mask.shape) != tuple(lead) + (L,):
            raise ShapeError(f"max_rows: mask shape {mask.shape} does not match {x.shape}")
        m2 = np.ascontiguousarray(mask.reshape(g, L), dtype=np.bool_)
    vals, arg = _accel.masked_max(x3, m2)

    def bw(gout):
        g2 = gout.reshape(g, d)
        gx = np.zeros((g, L, d), dtype=x.dtype)
        valid = arg >= 0
        np.put_along_axis(gx, np.where(valid, arg, 0)[:, None, :], np.where(valid, g2, 0)[:, None, :], axis=1)
        return (gx.reshape(x.shape),)

    return _result(vals.reshape(tuple(lead) + (d,)), (x,), "max_rows", bw)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with row-max subtraction.

    Entries where ``mask`` is False get probability zero; a row with no valid
    entries comes out all-zero.
    """
    if not np.isfinite(x.data).all():
        raise NumericError(f"softmax_rows: non-finite input of shape {x.shape}")
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        xm = np.where(mask, x.data, -np.inf)
    else:
        xm = x.data
    mx = xm.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(xm - mx)
    s = e.sum(axis=-1, keepdims=True)
    y = (e / np.where(s > 0, s, 1.0)).astype(x.dtype, copy=False)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), "softmax_rows", bw)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "max-reduce-rows": max_rows,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Shapes: (..., m, k) @ (k, n), (..., m, k) @ (..., k, n),
    (..., m, k) @ (k,) and (k,) @ (k, n).
    """
    a, b = _pair(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalars not allowed, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if a.ndim == 1 and b.ndim != 2:
        raise ShapeError(f"matmul: vector @ {b.shape} unsupported")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if b.ndim == 1:
            ga = g[..., None] * b.data
            gb = (a.data * g[..., None]).reshape(-1, b.shape[0]).sum(axis=0)
            return ga, gb
        if a.ndim == 1:
            return b.data @ g, np.outer(a.data, g)
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _result(out, (a, b), "matmul", bw)


def transpose(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {x.shape}")

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return _result(np.swapaxes(x.data, -1, -2), (x,), "transpose", bw)


def sum_(x: Tensor, axis=None) -> Tensor:
    y = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(y, (x,), "sum", bw)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), "reshape", bw)


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    xs = [as_tensor(x) for x in xs]
    if any(x.shape[:-1] != xs[0].shape[:-1] for x in xs):
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}")
    cuts = np.cumsum([x.shape[-1] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _result(np.concatenate([x.data for x in xs], axis=-1), xs, "concat", bw)


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """(..., d) -> (..., n, d) by copying the vector into every row."""
    y = np.repeat(x.data[..., None, :], n, axis=-2)

    def bw(g):
        return (g.sum(axis=-2),)

    return _result(y, (x,), "repeat_rows", bw)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]``; the backward pass scatter-adds into the table."""
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    y = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        _accel.scatter_add_rows(gt, idx.reshape(-1), np.ascontiguousarray(g.reshape(-1, table.shape[1])))
        return (gt,)

    return _result(y, (table,), "embedding", bw)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Batched row gather along axis -2.

    ``x`` is (*B, N, d) and ``idx`` is (*B, *rest) with values in [0, N);
    the result is (*B, *rest, d).
    """
    idx = np.asarray(idx, dtype=np.int64)
    *lead, n, d = x.shape
    lead = tuple(lead)
    if idx.shape[: len(lead)] != lead:
        raise ShapeError(f"take_rows: index shape {idx.shape} does not lead with {lead}")
    p = int(np.prod(lead)) if lead else 1
    base = (np.arange(p, dtype=np.int64) * n).reshape(lead + (1,) * (idx.ndim - len(lead)))
    flat = (idx + base).reshape(-1)
    table = x.data.reshape(p * n, d)
    y = table[flat].reshape(idx.shape + (d,))

    def bw(g):
        gt = np.zeros((p * n, d), dtype=x.dtype)
        _accel.scatter_add_rows(gt, flat, np.ascontiguousarray(g.reshape(-1, d)))
        return (gt.reshape(x.shape),)

    return _result(y, (x,), "take_rows", bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mask: np.ndarray | None,
    running: dict | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Feature-wise normalisation over every valid row of ``x`` (..., d).

    In training mode the statistics come from the rows selected by ``mask``
    and ``running['mean']`` / ``running['var']`` are updated in place; in
    evaluation mode the running statistics are used.
    """
    d = x.shape[-1]
    rows = x.data.reshape(-1, d)
    valid = np.ones(rows.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if training:
        sel = rows[valid]
        r = max(sel.shape[0], 1)
        mu = sel.mean(axis=0) if sel.shape[0] else np.zeros(d, x.dtype)
        var = ((sel - mu) ** 2).mean(axis=0) if sel.shape[0] else np.ones(d, x.dtype)
        if running is not None and sel.shape[0]:
            unbiased = var * r / max(r - 1, 1)
            running["mean"][...] = (1 - momentum) * running["mean"] + momentum * mu
            running["var"][...] = (1 - momentum) * running["var"] + momentum * unbiased
    else:
        mu, var, r = running["mean"], running["var"], None
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((rows - mu) * inv).astype(x.dtype, copy=False)
    y = (xhat * gamma.data + beta.data).reshape(x.shape)

    def bw(g):
        g2 = g.reshape(-1, d)
        gxhat = g2 * gamma.data
        if training:
            gv = np.where(valid[:, None], gxhat, 0.0)
            xv = np.where(valid[:, None], xhat, 0.0)
            gx = (inv / r) * (r * gv - gv.sum(axis=0) - xv * (gv * xv).sum(axis=0))
            gx = np.where(valid[:, None], gx, gxhat * inv)
        else:
            gx = gxhat * inv
        return gx.reshape(x.shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0)

    return _result(y, (x, gamma, beta), "batch_norm", bw)


# ----------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on everything on the tape that leads to ``loss``.

    Leaf gradients accumulate; the tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    records = _state.tape
    if not loss.requires_grad or not records:
        records.clear()
        raise ContractError("backward called with an empty tape or a loss that does not require grad")
    try:
        loss.grad = np.ones_like(loss.data)
        for out in reversed(records):
            if out.grad is None:
                continue
            pgrads = out._backward(out.grad)
            for p, pg in zip(out._parents, pgrads):
                if not p.requires_grad or pg is None:
                    continue
                pg = np.asarray(pg, dtype=p.dtype).reshape(p.shape)
                p.grad = pg.copy() if p.grad is None else p.grad + pg
    finally:
        for out in records:
            out._backward = None
            out._parents = ()
        records.clear()


def first_nonfinite() -> str | None:
    """Describe the earliest tape entry whose value is not finite."""
    for i, out in enumerate(_state.tape):
        if not np.isfinite(out.data).all():
            label = out.name or out._op
            return f"tape[{i}] op={out._op} ({label}) shape={out.shape}"
    return None
