"""A small reverse-mode differentiation engine on top of numpy.

Only what the encoder/decoder and the three training losses need is here:
2-D matmul, elementwise arithmetic with numpy broadcasting, reductions,
reshapes, row gathers, ReLU/hinge and a fused cosine-distance kernel.

Every op returns a new :class:`Tensor`.  When at least one input requires a
gradient the result carries a node pointing back at its inputs; calling
:func:`backward` on a scalar result topologically sorts those nodes (the
"tape") and replays them once in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .exceptions import DegenerateNormError, DimensionError, GraphError

NORM_EPS = 1e-12


@dataclass(frozen=True)
class _Node:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class Tensor:
    """Dense float64 array with optional gradient tracking.

    Parameters
    ----------
    values : array_like
        Data, copied and cast to float64.
    requires_grad : bool
        Whether ``backward`` should populate ``grad`` for this tensor when it
        is a leaf.
    """

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._consumed = False

    @classmethod
    def _from_op(cls, values, op, inputs, backward):
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        out._consumed = False
        out.requires_grad = any(t.requires_grad for t in inputs)
        out._node = _Node(op, tuple(inputs), backward) if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

    def __len__(self):
        return len(self.values)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.values, b.values, "add")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.values + b.values, "add", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.values, b.values, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.values - b.values, "sub", (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.values, b.values, "mul")
    av, bv = a.values, b.values
    return Tensor._from_op(
        av * bv, "mul", (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return Tensor._from_op(av * av, "square", (a,), lambda g: (2.0 * av * g,))


def relu(a) -> Tensor:
    """max(0, x) with subgradient 0 at exactly 0."""
    a = as_tensor(a)
    mask = a.values > 0
    return Tensor._from_op(np.where(mask, a.values, 0.0), "relu", (a,), lambda g: (g * mask,))


hinge = relu


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return Tensor._from_op(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.sum(a.values, axis=axis, keepdims=keepdims), "sum", (a,), back)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._from_op(a.values.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._from_op(
        np.transpose(a.values, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),)
    )


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.values, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {old} to {shape}") from exc
    return Tensor._from_op(out, "broadcast_to", (a,), lambda g: (_unbroadcast(g, old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor._from_op(out, "concat", ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def index(a, idx) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(a.values[idx], "index", (a,), back)


def _scatter_rows(rows: np.ndarray, vals: np.ndarray, k: int) -> np.ndarray:
    """Sum rows of ``vals`` into a ``(k, F)`` array at ``rows`` (duplicates add up)."""
    f = vals.shape[1]
    flat = (rows[:, None] * f + np.arange(f)).ravel()
    return np.bincount(flat, weights=vals.ravel(), minlength=k * f).reshape(k, f)


def take_rows(a, rows) -> Tensor:
    """``a[rows]`` for a 2-D tensor and a 1-D integer index array."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    if a.values.ndim != 2 or rows.ndim != 1:
        return index(a, rows)
    k = a.shape[0]
    return Tensor._from_op(a.values[rows], "take_rows", (a,),
                           lambda g: (_scatter_rows(rows, g, k),))


# ---------------------------------------------------------------------------
# losses / distances
# ---------------------------------------------------------------------------

def mse(xhat, x) -> Tensor:
    """Mean squared error over all elements."""
    xhat, x = as_tensor(xhat), as_tensor(x)
    if xhat.shape != x.shape:
        raise DimensionError(f"mse: shape mismatch {xhat.shape} vs {x.shape}")
    return tmean(square(sub(xhat, x)))


def _row_norms(v: np.ndarray, what: str) -> np.ndarray:
    if v.ndim != 2 or v.shape[1] < 1:
        raise DimensionError(f"{what}: expected a K x F matrix with F >= 1, got {v.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", v, v))
    bad = np.flatnonzero(norms < NORM_EPS)
    if bad.size:
        raise DegenerateNormError(
            f"{what}: {bad.size} row(s) with norm < {NORM_EPS:g} (first: row {bad[0]})"
        )
    return norms


def normalize_rows(a) -> Tensor:
    """Scale each row to unit L2 norm."""
    a = as_tensor(a)
    norms = _row_norms(a.values, "normalize_rows")[:, None]
    u = a.values / norms

    def back(g):
        return ((g - u * np.sum(g * u, axis=1, keepdims=True)) / norms,)

    return Tensor._from_op(u, "normalize_rows", (a,), back)


def cosine_distance_matrix(za, zb) -> Tensor:
    """``D[a, b] = 1 - cos(za[a], zb[b])``, clipped to [0, 2].

    Raises :class:`DegenerateNormError` when any row has norm below 1e-12.
    """
    za, zb = as_tensor(za), as_tensor(zb)
    na = _row_norms(za.values, "cosine_distance_matrix")[:, None]
    nb = _row_norms(zb.values, "cosine_distance_matrix")[:, None]
    if za.shape[1] != zb.shape[1]:
        raise DimensionError(f"feature dims differ: {za.shape} vs {zb.shape}")
    ua, ub = za.values / na, zb.values / nb
    dist = np.clip(1.0 - ua @ ub.T, 0.0, 2.0)

    def back(g):
        gs = -g
        gua = gs @ ub
        gub = gs.T @ ua
        ga = (gua - ua * np.sum(gua * ua, axis=1, keepdims=True)) / na
        gb = (gub - ub * np.sum(gub * ub, axis=1, keepdims=True)) / nb
        return ga, gb

    return Tensor._from_op(dist, "cosine_distance_matrix", (za, zb), back)


def cosine_distance_pairs(z, rows_a, rows_b) -> Tensor:
    """``1 - cos(z[rows_a[t]], z[rows_b[t]])`` for each t, as one fused op."""
    z = as_tensor(z)
    rows_a = np.asarray(rows_a, dtype=np.intp)
    rows_b = np.asarray(rows_b, dtype=np.intp)
    norms = _row_norms(z.values, "cosine_distance_pairs")[:, None]
    u = z.values / norms
    ua, ub = u[rows_a], u[rows_b]
    k = z.shape[0]

    def back(g):
        g = -g[:, None]
        gu = _scatter_rows(np.concatenate([rows_a, rows_b]),
                           np.concatenate([g * ub, g * ua]), k)
        return ((gu - u * np.sum(gu * u, axis=1, keepdims=True)) / norms,)

    return Tensor._from_op(1.0 - np.einsum("ij,ij->i", ua, ub), "cosine_distance_pairs", (z,), back)


def detach(t) -> Tensor:
    """Same values, cut from the graph."""
    t = as_tensor(t)
    return Tensor(t.values, requires_grad=False)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def build_tape(root: Tensor) -> list[Tensor]:
    """Non-leaf tensors reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t._node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in reversed(t._node.inputs):
            if inp._node is not None and id(inp) not in seen:
                stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf that requires it.

    Leaf gradients accumulate (call ``zero_grad`` between steps).  A given
    loss may be differentiated only once.
    """
    if loss.size != 1 or loss.values.ndim > 1:
        raise GraphError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward called on a tensor detached from any graph")
    if loss._consumed:
        raise GraphError("backward already ran on this graph")
    loss._consumed = True

    if loss._node is None:
        loss.grad = np.ones_like(loss.values) if loss.grad is None else loss.grad + 1.0
        return

    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for t in reversed(tape):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for inp, gi in zip(t._node.inputs, t._node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
