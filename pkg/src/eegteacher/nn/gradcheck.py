from __future__ import annotations

import numpy as np

from .tensor import Tensor, precision


def numerical_grad(fn, tensor, h=1e-3):
    """Central differences of scalar ``fn()`` w.r.t. every element of ``tensor``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(fn().data)
        flat[i] = old - h
        fm = float(fn().data)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b, floor=1e-6):
    """``|a-b| / max(|a|, |b|, floor)`` in L2 norm.

    The floor turns the comparison absolute for gradients that are zero in
    exact arithmetic (e.g. a key bias under softmax shift invariance), where
    finite-difference noise would otherwise dominate the ratio.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn, tensors, h=1e-3):
    """Compare analytic and numerical gradients of scalar ``fn()``.

    ``tensors`` maps names to float64 leaf tensors that ``fn`` closes over.
    Returns name -> relative error.
    """
    for t in tensors.values():
        if t.dtype != np.float64:
            raise TypeError("gradient checks must run on float64 tensors")
        t.grad = None
    out = fn()
    out.backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for n, t in tensors.items()}
    return {n: relative_error(analytic[n], numerical_grad(fn, t, h)) for n, t in tensors.items()}


def leaf(data, rng=None):
    """Float64 leaf tensor; ``data`` may be a shape (filled from ``rng``)."""
    if isinstance(data, tuple):
        data = rng.standard_normal(data)
    with precision(np.float64):
        return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
