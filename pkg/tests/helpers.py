"""Shared test utilities: central finite differences and small model builders."""

import numpy as np

from dfkdlab.tensor import Tape, Tensor


def analytic_grads(fn, arrays):
    """Gradients of the scalar ``fn(*tensors)`` with respect to every input array."""
    with Tape() as tape:
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*ts)
        tape.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def numeric_grads(fn, arrays, h=1e-6):
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for j in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][j] += h
            minus[i][j] -= h
            g[j] = (float(fn(*map(Tensor, plus)).data) - float(fn(*map(Tensor, minus)).data)) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def max_fd_error(fn, arrays, h=1e-6):
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    return max(rel_error(x, y) for x, y in zip(analytic_grads(fn, arrays), numeric_grads(fn, arrays, h)))
