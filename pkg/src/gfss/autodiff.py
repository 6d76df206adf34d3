"""Tape-based reverse-mode differentiation over dense float64 arrays of rank <= 2.

Every operation in this module computes its value eagerly with numpy. When a
:class:`Tape` is active on the current thread and at least one operand
requires a gradient, the operation also appends a record holding a
vector-Jacobian product closure. :meth:`Tape.backward` replays those records
once, newest first.

Shapes never broadcast implicitly. The exceptions are spelled out per op:
``matmul``/``outer``/``row_outer`` follow linear-algebra rules, reductions
collapse an axis, ``add_row`` adds one row vector to every row, and a Python
scalar combined with a tensor goes through ``scale``/``shift``.

Example
-------
>>> import numpy as np
>>> value, (g,) = value_and_grad(lambda x: sum_(x * x), [np.array([1.0, 2.0, 3.0])])
>>> g
array([2., 4., 6.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor", "Tape", "as_tensor", "value_and_grad",
    "add", "sub", "mul", "neg", "scale", "shift", "matmul", "transpose", "ravel",
    "exp", "log", "tanh", "maximum", "row_softmax", "row_log_softmax",
    "col_softmax", "block_log_softmax", "outer", "row_outer", "add_row", "sum_", "mean",
    "gather_rows", "concat_rows",
]

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable float64 array of rank 0, 1 or 2 with an optional gradient flag."""

    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 100  # keep ndarray <op> Tensor dispatching to Tensor

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"rank {arr.ndim} tensors are not supported")
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"empty dimension in shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, value: np.ndarray, requires_grad: bool) -> "Tensor":
        # results of ops are fresh (or read-only views): skip the defensive copy
        out = cls.__new__(cls)
        arr = np.asarray(value, dtype=np.float64)
        if arr.flags.writeable:
            arr.setflags(write=False)
        out.data = arr
        out.requires_grad = requires_grad
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    # operators -------------------------------------------------------------
    def __add__(self, other):
        return shift(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return shift(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), other) if _is_scalar(other) else sub(other, self)

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def as_tensor(x) -> Tensor:
    """Wrap ``x`` as a constant tensor; tensors pass through unchanged."""
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class OpRecord:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray, tuple[bool, ...]], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are recorded.
    A tape can be replayed exactly once: a second :meth:`backward` raises
    :class:`ContractError` because the saved activations may be stale.
    """

    records: list[OpRecord] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def backward(self, output: Tensor) -> dict[int, np.ndarray]:
        """Return gradients of scalar ``output`` keyed by ``id`` of each leaf/intermediate."""
        if self.consumed:
            raise ContractError("tape already replayed; re-run the forward pass")
        if output.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            need = tuple(t.requires_grad for t in rec.inputs)
            for inp, gi in zip(rec.inputs, rec.vjp(g, need)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return grads


def _emit(kind: str, value: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(value, track)
    if track:
        tape.records.append(OpRecord(kind, inputs, out, vjp))
    return out


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g, need: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g, need: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g, need: (g * bd if need[0] else None, g * ad if need[1] else None))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g, need: (-g,))


def scale(a, s: float) -> Tensor:
    a, s = as_tensor(a), float(s)
    return _emit("scale", a.data * s, (a,), lambda g, need: (g * s,))


def shift(a, s: float) -> Tensor:
    a, s = as_tensor(a), float(s)
    return _emit("shift", a.data + s, (a,), lambda g, need: (g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g, need: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0.0):
        raise DomainError(f"log of non-positive value (min {x.min():.3g})")
    return _emit("log", np.log(x), (a,), lambda g, need: (g / x,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g, need: (g * (1.0 - out * out),))


def maximum(a, c: float) -> Tensor:
    """Elementwise ``max(a, c)`` against a constant; gradient passes where ``a >= c``."""
    a, c = as_tensor(a), float(c)
    keep = a.data >= c
    return _emit("maximum", np.where(keep, a.data, c), (a,), lambda g, need: (g * keep,))


# linear algebra ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``(m,k)@(k,n)``, ``(m,k)@(k,)`` or ``(k,)@(k,n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or (a.ndim == 1 and b.ndim == 1):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, need):
        ga = gb = None
        if bd.ndim == 1:  # (m,k)@(k,)
            if need[0]:
                ga = np.outer(g, bd)
            if need[1]:
                gb = ad.T @ g
        elif ad.ndim == 1:  # (k,)@(k,n)
            if need[0]:
                ga = bd @ g
            if need[1]:
                gb = np.outer(ad, g)
        else:
            if need[0]:
                ga = g @ bd.T
            if need[1]:
                gb = ad.T @ g
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), vjp)


def ravel(a) -> Tensor:
    """Row-major flatten to a vector."""
    a = as_tensor(a)
    shape = a.shape
    return _emit("ravel", a.data.reshape(-1), (a,), lambda g, need: (g.reshape(shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")
    return _emit("transpose", a.data.T, (a,), lambda g, need: (g.T,))


def outer(u, v) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1:
        raise ShapeError(f"outer needs two vectors, got {u.shape} and {v.shape}")
    ud, vd = u.data, v.data
    return _emit("outer", np.outer(ud, vd), (u, v),
                 lambda g, need: (g @ vd if need[0] else None, ud @ g if need[1] else None))


def row_outer(a, b) -> Tensor:
    """Row-wise outer product: ``out[j, k*M + m] = a[j, k] * b[j, m]``.

    The batched form of :func:`outer`: row ``j`` holds the row-major
    flattening of ``outer(a[j], b[j])``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"row_outer: incompatible shapes {a.shape}, {b.shape}")
    ad, bd = a.data, b.data
    n, k = ad.shape
    m = bd.shape[1]

    def vjp(g, need):
        g3 = g.reshape(n, k, m)
        ga = np.einsum("jkm,jm->jk", g3, bd) if need[0] else None
        gb = np.einsum("jkm,jk->jm", g3, ad) if need[1] else None
        return ga, gb

    return _emit("row_outer", (ad[:, :, None] * bd[:, None, :]).reshape(n, k * m), (a, b), vjp)


def add_row(x, r) -> Tensor:
    """Add the vector ``r`` to every row of matrix ``x``."""
    x, r = as_tensor(x), as_tensor(r)
    if x.ndim != 2 or r.ndim != 1 or x.shape[1] != r.shape[0]:
        raise ShapeError(f"add_row: incompatible shapes {x.shape}, {r.shape}")
    return _emit("add_row", x.data + r.data, (x, r),
                 lambda g, need: (g, g.sum(axis=0) if need[1] else None))


# softmax family ---------------------------------------------------------------

def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def row_softmax(a) -> Tensor:
    """Softmax along the last axis (a vector is treated as a single row)."""
    a = as_tensor(a)
    if a.ndim == 0:
        raise ShapeError("row_softmax needs rank >= 1")
    s = _softmax(a.data, axis=-1)
    return _emit("row_softmax", s, (a,),
                 lambda g, need: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def row_log_softmax(a) -> Tensor:
    """``log(row_softmax(a))`` evaluated without forming the softmax first."""
    a = as_tensor(a)
    if a.ndim == 0:
        raise ShapeError("row_log_softmax needs rank >= 1")
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    s = np.exp(out)
    return _emit("row_log_softmax", out, (a,),
                 lambda g, need: (g - s * g.sum(axis=-1, keepdims=True),))


def col_softmax(a) -> Tensor:
    """Softmax down each column of a matrix, so every column sums to one."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"col_softmax needs a matrix, got {a.shape}")
    s = _softmax(a.data, axis=0)
    return _emit("col_softmax", s, (a,),
                 lambda g, need: (s * (g - (g * s).sum(axis=0, keepdims=True)),))


def block_log_softmax(a, block: int) -> Tensor:
    """Log-softmax over consecutive blocks of ``block`` entries in every row.

    With ``a`` of shape ``(N, m * block)``, entries ``[j, i*block:(i+1)*block]``
    are normalized together. Reading each row as a column-major matrix with
    ``block`` rows, this is a log column-softmax of that matrix.
    """
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[1] % block:
        raise ShapeError(f"block_log_softmax: width {a.shape} not a multiple of {block}")
    shape = a.shape
    x = a.data.reshape(-1, block)
    shifted = x - x.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    s = np.exp(out)

    def vjp(g, need):
        g2 = g.reshape(-1, block)
        return ((g2 - s * g2.sum(axis=1, keepdims=True)).reshape(shape),)

    return _emit("block_log_softmax", out.reshape(shape), (a,), vjp)


# reductions and indexing ------------------------------------------------------

def _check_axis(a: Tensor, axis) -> None:
    if axis is not None and not (0 <= axis < a.ndim):
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")


def sum_(a, axis: int | None = None) -> Tensor:
    """Full sum (``axis=None``), per-column sum (``axis=0``) or per-row sum (``axis=1``)."""
    a = as_tensor(a)
    _check_axis(a, axis)
    shape = a.shape
    if axis is None:
        return _emit("sum", np.asarray(a.data.sum()), (a,),
                     lambda g, need: (np.full(shape, float(g)),))
    return _emit("sum", a.data.sum(axis=axis), (a,),
                 lambda g, need: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis)
    count = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / count)


def gather_rows(a, index) -> Tensor:
    """Select rows ``a[index]``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1 or a.ndim == 0:
        raise ShapeError("gather_rows needs a 1-D index into a tensor of rank >= 1")
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def vjp(g, need):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("gather_rows", a.data[idx], (a,), vjp)


def concat_rows(parts: Sequence) -> Tensor:
    """Stack matrices (or vectors) with equal trailing shape along axis 0."""
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    tail = parts[0].shape[1:]
    if any(p.ndim == 0 or p.shape[1:] != tail for p in parts):
        raise ShapeError(f"concat_rows: trailing shapes differ {[p.shape for p in parts]}")
    bounds = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _emit("concat_rows", np.concatenate([p.data for p in parts], axis=0), parts,
                 lambda g, need: tuple(np.split(g, bounds, axis=0)))


# driver -----------------------------------------------------------------------

def value_and_grad(loss_fn: Callable[..., Tensor], params):
    """Evaluate ``loss_fn`` and its gradient with respect to every parameter.

    ``params`` is either a sequence of arrays (passed positionally) or a
    mapping name -> array (passed as keyword arguments). Gradients come back
    in the same container type, as fresh numpy arrays shaped like the params.
    """
    named = isinstance(params, Mapping)
    items = list(params.items()) if named else list(enumerate(params))
    leaves = [(k, Tensor(v, requires_grad=True)) for k, v in items]
    with Tape() as tape:
        out = loss_fn(**dict(leaves)) if named else loss_fn(*[t for _, t in leaves])
    if not isinstance(out, Tensor):
        raise ContractError(f"loss_fn must return a Tensor, got {type(out).__name__}")
    if out.size != 1:
        raise ContractError(f"loss_fn must return a scalar, got shape {out.shape}")
    value = out.item()
    if out.requires_grad:
        table = tape.backward(out)
    else:
        table = {}
    grads = [(k, table.get(id(t), np.zeros(t.shape)).reshape(t.shape)) for k, t in leaves]
    return value, (dict(grads) if named else [g for _, g in grads])
