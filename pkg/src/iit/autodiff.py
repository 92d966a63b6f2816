"""Tape-based reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D array (vectors are 1 x n rows, scalars 1 x 1). Forward
values are computed eagerly; each recorded node stores a closure mapping the
node's adjoint to adjoints of its inputs. Shapes must match exactly: there is
no implicit broadcasting (use :func:`broadcast_rows` explicitly).

Two forward passes may be recorded on the same tape and stitched together
with :func:`overwrite`; parameters registered once by name are shared by both
passes, so their adjoints accumulate contributions from each.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from iit.errors import NonFiniteValue, NonScalarLoss, RangeError, ShapeError

Array = np.ndarray


def _as_matrix(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim == 2:
        return a
    raise ShapeError(f"rank {a.ndim} values are not supported")


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self, grad: bool = True):
        self.grad = grad
        self.values: list[Array] = []
        self.inputs: list[tuple[int, ...]] = []
        self.backfns: list[Callable | None] = []
        self.adjoints: list[Array | None] | None = None
        self._params: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.values)

    def _record(self, value: Array, inputs: tuple[ValueRef, ...] = (),
                backfn: Callable | None = None) -> ValueRef:
        for ref in inputs:
            if ref.tape is not self:
                raise ShapeError("operands live on different tapes")
        idx = len(self.values)
        self.values.append(value)
        if self.grad:
            self.inputs.append(tuple(r.index for r in inputs))
            self.backfns.append(backfn)
        return ValueRef(self, idx)

    def const(self, value) -> ValueRef:
        return self._record(_as_matrix(value))

    def param(self, name: str, value) -> ValueRef:
        """Register a named parameter; the same name maps to one node."""
        if name in self._params:
            return ValueRef(self, self._params[name])
        ref = self._record(_as_matrix(value))
        self._params[name] = ref.index
        return ref

    @property
    def param_nodes(self) -> Mapping[str, int]:
        return dict(self._params)


class ValueRef:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> Array:
        return self.tape.values[self.index]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> Array | None:
        adj = self.tape.adjoints
        return None if adj is None else adj[self.index]

    def __add__(self, other: ValueRef) -> ValueRef:
        return add(self, other)

    def __matmul__(self, other: ValueRef) -> ValueRef:
        return matmul(self, other)

    def __mul__(self, c: float) -> ValueRef:
        return scalar_mul(self, c)

    __rmul__ = __mul__

    def __neg__(self) -> ValueRef:
        return scalar_mul(self, -1.0)

    def __sub__(self, other: ValueRef) -> ValueRef:
        return add(self, scalar_mul(other, -1.0))

    def __repr__(self) -> str:
        return f"ValueRef(#{self.index}, shape={self.shape})"


# -- primitives ---------------------------------------------------------------

def matmul(a: ValueRef, b: ValueRef) -> ValueRef:
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul {av.shape} @ {bv.shape}")
    return a.tape._record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: ValueRef, b: ValueRef) -> ValueRef:
    if a.shape != b.shape:
        raise ShapeError(f"add {a.shape} + {b.shape}")
    return a.tape._record(a.value + b.value, (a, b), lambda g: (g, g))


def mul(a: ValueRef, b: ValueRef) -> ValueRef:
    """Elementwise product."""
    if a.shape != b.shape:
        raise ShapeError(f"mul {a.shape} * {b.shape}")
    av, bv = a.value, b.value
    return a.tape._record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scalar_mul(a: ValueRef, c: float) -> ValueRef:
    c = float(c)
    return a.tape._record(a.value * c, (a,), lambda g: (g * c,))


def total(a: ValueRef) -> ValueRef:
    """Sum of all entries, as a 1 x 1 value."""
    shape = a.shape
    return a.tape._record(a.value.sum().reshape(1, 1), (a,),
                          lambda g: (np.full(shape, g[0, 0]),))


def concat(parts: Sequence[ValueRef], axis: int = 1) -> ValueRef:
    if not parts:
        raise ShapeError("concat of nothing")
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise ShapeError(f"concat shapes {[p.shape for p in parts]} along axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        if axis == 1:
            return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))
        return tuple(g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    value = np.concatenate([p.value for p in parts], axis=axis)
    return parts[0].tape._record(value, tuple(parts), back)


def slice_cols(a: ValueRef, lo: int, hi: int) -> ValueRef:
    rows, cols = a.shape
    if not 0 <= lo < hi <= cols:
        raise RangeError(f"columns [{lo}, {hi}) outside width {cols}")

    def back(g):
        out = np.zeros((rows, cols))
        out[:, lo:hi] = g
        return (out,)

    return a.tape._record(a.value[:, lo:hi].copy(), (a,), back)


def slice_rows(a: ValueRef, lo: int, hi: int) -> ValueRef:
    rows, cols = a.shape
    if not 0 <= lo < hi <= rows:
        raise RangeError(f"rows [{lo}, {hi}) outside height {rows}")

    def back(g):
        out = np.zeros((rows, cols))
        out[lo:hi] = g
        return (out,)

    return a.tape._record(a.value[lo:hi].copy(), (a,), back)


def take_rows(a: ValueRef, rows: Sequence[int]) -> ValueRef:
    """Gather rows by index (duplicates allowed)."""
    idx = np.asarray(rows, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise RangeError("row index out of range")
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape._record(a.value[idx], (a,), back)


def relu(a: ValueRef) -> ValueRef:
    mask = a.value > 0
    return a.tape._record(a.value * mask, (a,), lambda g: (g * mask,))


def tanh(a: ValueRef) -> ValueRef:
    y = np.tanh(a.value)
    return a.tape._record(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: ValueRef) -> ValueRef:
    y = _sigmoid(a.value)
    return a.tape._record(y, (a,), lambda g: (g * y * (1.0 - y),))


def _log_softmax(z: Array) -> Array:
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax(a: ValueRef) -> ValueRef:
    """Row-wise softmax."""
    p = np.exp(_log_softmax(a.value))

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return a.tape._record(p, (a,), back)


def _row_weights(n: int, weights) -> Array:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise ShapeError(f"{w.shape[0]} weights for {n} rows")
    return w


def softmax_cross_entropy(logits: ValueRef, targets, weights=None) -> ValueRef:
    """Weighted sum over rows of -log softmax(logits)[target].

    ``targets`` is a class index or one index per row. Default weights are
    1/rows, i.e. the mean over rows.
    """
    z = logits.value
    n, k = z.shape
    t = np.broadcast_to(np.asarray(targets, dtype=np.intp).reshape(-1), (n,))
    if t.size and (t.min() < 0 or t.max() >= k):
        raise RangeError(f"class index outside [0, {k})")
    w = _row_weights(n, weights)
    logp = _log_softmax(z)
    rows = np.arange(n)
    loss = -(w * logp[rows, t]).sum()

    def back(g):
        grad = np.exp(logp)
        grad[rows, t] -= 1.0
        return (grad * (w[:, None] * g[0, 0]),)

    return logits.tape._record(np.array([[loss]]), (logits,), back)


def logistic_loss(logits: ValueRef, targets, weights=None) -> ValueRef:
    """Binary cross-entropy on logits (n x 1) against 0/1 targets."""
    z = logits.value
    if z.shape[1] != 1:
        raise ShapeError("logistic_loss expects one logit per row")
    n = z.shape[0]
    y = np.broadcast_to(np.asarray(targets, dtype=np.float64).reshape(-1), (n,))[:, None]
    w = _row_weights(n, weights)[:, None]
    # log(1 + e^z) - y z, computed stably
    per_row = np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z)))
    loss = (w * per_row).sum()
    p = _sigmoid(z)
    return logits.tape._record(np.array([[loss]]), (logits,),
                               lambda g: ((p - y) * w * g[0, 0],))


def embedding_lookup(table: ValueRef, indices) -> ValueRef:
    """Rows of ``table`` selected by ``indices`` (one row per index)."""
    return take_rows(table, np.asarray(indices, dtype=np.intp).reshape(-1))


def broadcast_rows(a: ValueRef, n: int) -> ValueRef:
    """Tile a single row ``n`` times."""
    if a.shape[0] != 1:
        raise ShapeError(f"broadcast_rows expects one row, got {a.shape}")
    return a.tape._record(np.repeat(a.value, n, axis=0), (a,),
                          lambda g: (g.sum(axis=0, keepdims=True),))


def repeat_rows(a: ValueRef, r: int) -> ValueRef:
    """Repeat each row ``r`` times consecutively."""
    rows, cols = a.shape
    return a.tape._record(np.repeat(a.value, r, axis=0), (a,),
                          lambda g: (g.reshape(rows, r, cols).sum(axis=1),))


def reshape(a: ValueRef, shape: tuple[int, int]) -> ValueRef:
    """Row-major reshape."""
    old = a.shape
    if shape[0] * shape[1] != old[0] * old[1]:
        raise ShapeError(f"cannot reshape {old} to {shape}")
    return a.tape._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def overwrite(slot: ValueRef, replacement: ValueRef, lo: int, hi: int) -> ValueRef:
    """``slot`` with columns [lo, hi) replaced by ``replacement``.

    Adjoints of the replaced columns flow to ``replacement`` only; the rest
    flow to ``slot``.
    """
    if slot.tape is not replacement.tape:
        raise ShapeError("slot and replacement live on different tapes")
    rows, cols = slot.shape
    if not 0 <= lo < hi <= cols:
        raise RangeError(f"columns [{lo}, {hi}) outside width {cols}")
    if replacement.shape != (rows, hi - lo):
        raise ShapeError(f"replacement {replacement.shape} for range of shape {(rows, hi - lo)}")
    value = slot.value.copy()
    value[:, lo:hi] = replacement.value

    def back(g):
        to_slot = g.copy()
        to_slot[:, lo:hi] = 0.0
        return (to_slot, g[:, lo:hi])

    return slot.tape._record(value, (slot, replacement), back)


# -- reverse sweep ------------------------------------------------------------

def backward(tape: Tape, loss: ValueRef) -> dict[str, Array]:
    """Populate adjoints from ``loss`` and return gradients per parameter name."""
    if not tape.grad:
        raise RuntimeError("tape was recorded without gradient tracking")
    if loss.shape != (1, 1):
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    adj: list[Array | None] = [None] * len(tape.values)
    adj[loss.index] = np.ones((1, 1))
    for i in range(loss.index, -1, -1):
        g = adj[i]
        fn = tape.backfns[i]
        if g is None or fn is None:
            continue
        for j, gj in zip(tape.inputs[i], fn(g)):
            if gj is None:
                continue
            adj[j] = gj if adj[j] is None else adj[j] + gj
    tape.adjoints = adj
    return {name: (adj[i] if adj[i] is not None else np.zeros_like(tape.values[i]))
            for name, i in tape._params.items()}


def grad_check(build: Callable[[Tape, dict[str, ValueRef]], ValueRef],
               params: Mapping[str, Array], eps: float = 1e-4) -> float:
    """Max over components of |analytic - central difference| / max(1, |analytic|).

    ``build(tape, refs)`` records a scalar loss given parameter refs.
    """
    params = {k: _as_matrix(v).copy() for k, v in params.items()}
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteValue(k)

    def run(values, grad):
        tape = Tape(grad=grad)
        refs = {k: tape.param(k, v) for k, v in values.items()}
        return tape, build(tape, refs)

    tape, loss = run(params, True)
    analytic = backward(tape, loss)
    worst = 0.0
    for name, p in params.items():
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            up = run(params, False)[1].value[0, 0]
            p[idx] = orig - eps
            down = run(params, False)[1].value[0, 0]
            p[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[name][idx]
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise NonFiniteValue(f"{name}{list(idx)}")
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


__all__ = [
    "Tape", "ValueRef", "matmul", "add", "mul", "scalar_mul", "total", "concat",
    "slice_cols", "slice_rows", "take_rows", "relu", "tanh", "sigmoid", "softmax",
    "softmax_cross_entropy", "logistic_loss", "embedding_lookup", "broadcast_rows",
    "repeat_rows", "reshape", "overwrite", "backward", "grad_check",
]
