"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tape` records primitive operations while it is active (``with Tape()
as tape:``).  Every tensor created by an operation on a tape remembers its node
index; :meth:`Tape.backward` walks the nodes in reverse creation order and
writes ``.grad`` on every ``requires_grad`` leaf that contributed to the root.

Outside an active tape the same operations simply compute values, which is
the fast path used for inference and sampling.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "silu",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "square",
    "sum",
    "mean",
    "sum_of_squares",
    "l2_norm",
    "logsumexp",
    "softmax",
    "log_softmax",
    "getitem",
    "concat",
    "embedding",
    "reshape",
    "batchnorm_stats",
    "backward",
]


class TapeError(RuntimeError):
    """Misuse of the differentiation tape (non-scalar root, double backward, ...)."""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "dfkdlab_active_tape", default=None
)


class Tensor:
    """Dense float64 array that can take part in a differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None):
        return sum(self, axis=axis)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in creation order, which is already a topological order
    of the computation graph.  A tape supports exactly one backward pass; call
    :meth:`reset` (or open a new tape) before differentiating again.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise TapeError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.out._tape = None
            node.out._index = -1
        self.nodes = []
        self.consumed = False

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); reset it first")
        out._tape = self
        out._index = len(self.nodes)
        out.requires_grad = True
        self.nodes.append(_Node(out, parents, backward_fn))
        return out

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise TapeError(f"backward() needs a scalar root, got shape {root.shape}")
        if self.consumed:
            raise TapeError("second backward() on the same tape; reset the tape first")
        if root._tape is not self:
            raise TapeError("root tensor was not produced on this tape")
        self.consumed = True

        node_grads: list[np.ndarray | None] = [None] * (root._index + 1)
        node_grads[root._index] = np.ones_like(root.data)
        leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}

        for i in range(root._index, -1, -1):
            g = node_grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is self:
                    j = parent._index
                    node_grads[j] = pg if node_grads[j] is None else node_grads[j] + pg
                else:
                    key = id(parent)
                    if key in leaf_grads:
                        leaf_grads[key] = (parent, leaf_grads[key][1] + pg)
                    else:
                        leaf_grads[key] = (parent, pg)

        for leaf, g in leaf_grads.values():
            leaf.grad = np.array(g, dtype=np.float64).reshape(leaf.shape)


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``root``."""
    if root._tape is None:
        if root.data.size != 1:
            raise TapeError(f"backward() needs a scalar root, got shape {root.shape}")
        raise TapeError("root is not on an active tape")
    root._tape.backward(root)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return out
    if not any(p.requires_grad for p in parents):
        return out
    return tape.record(out, tuple(parents), backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(x: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(x)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"{what}: non-finite value {x[idx]!r} at index {idx}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def silu(a: Tensor) -> Tensor:
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(a.data * sig, (a,), lambda g: (g * sig * (1.0 + a.data * (1.0 - sig)),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul width mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,))


# ---------------------------------------------------------------- reductions


def _expand(g: np.ndarray, shape, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    return _make(a.data.sum(axis=axis), (a,), lambda g: (_expand(g, a.shape, axis).copy(),))


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return _make(
        a.data.mean(axis=axis), (a,), lambda g: (_expand(g, a.shape, axis) / n,)
    )


def sum_of_squares(a: Tensor, axis=None) -> Tensor:
    return _make(
        (a.data * a.data).sum(axis=axis),
        (a,),
        lambda g: (2.0 * _expand(g, a.shape, axis) * a.data,),
    )


def l2_norm(a: Tensor, axis=None) -> Tensor:
    """Euclidean norm; the gradient at exactly zero is taken as zero."""
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def bw(g):
        denom = _expand(out, a.shape, axis)
        safe = np.where(denom > 0, denom, 1.0)
        return (np.where(denom > 0, _expand(g, a.shape, axis) * a.data / safe, 0.0),)

    return _make(out, (a,), bw)


def logsumexp(x, temperature: float = 1.0, axis=None) -> Tensor:
    """``temperature * log(sum(exp(x / temperature)))`` with max subtraction."""
    x = _as_tensor(x)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if x.size == 0:
        raise ValueError("logsumexp of an empty tensor")
    _check_finite(x.data, "logsumexp input")
    s = x.data / temperature
    m = s.max(axis=axis, keepdims=True)
    e = np.exp(s - m)
    tot = e.sum(axis=axis, keepdims=True)
    out = temperature * (np.log(tot) + m)
    weights = e / tot
    if axis is None:
        out = out.reshape(())
    else:
        out = np.squeeze(out, axis=axis)
    return _make(out, (x,), lambda g: (_expand(g, x.shape, axis) * weights,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = s - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------- structure


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def embedding(table: Tensor, index) -> Tensor:
    """Row lookup ``table[index]``; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(table.data[index], (table,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def batchnorm_stats(batch: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel mean and biased (divide-by-B) variance of a ``B x C`` batch."""
    if batch.ndim != 2:
        raise ValueError(f"batchnorm_stats expects B x C, got shape {batch.shape}")
    if batch.shape[0] < 2:
        raise ValueError(f"batchnorm_stats needs at least 2 rows, got {batch.shape[0]}")
    mu = mean(batch, axis=0)
    centered = sub(batch, mu)
    var = mean(square(centered), axis=0)
    return mu, var
