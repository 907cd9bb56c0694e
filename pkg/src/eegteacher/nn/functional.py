"""Differentiable layer primitives with hand-written backward passes.

Normalisations, convolution and the softmax family are fused ops rather
than compositions of elementwise tensors: fewer graph nodes, fewer
temporaries, and the backward formulas are the textbook ones.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import _make, _unbroadcast, add, as_tensor, matmul

_SQRT2 = float(np.sqrt(2.0))  # python floats keep float32 arrays in float32
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    w = weight.data
    b = None if bias is None else bias.data
    out = x.data @ w.T
    if b is not None:
        out = out + b

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w)
        g2 = g.reshape(-1, g.shape[-1])
        if weight.requires_grad:
            weight._accumulate(g2.T @ x.data.reshape(-1, x.shape[-1]))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _make(x.data * mask, (x,), backward)


def gelu(x):
    """Exact (erf) GELU."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / _SQRT2))
    out = (d * cdf).astype(d.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * d * d)
        x._accumulate((g * (cdf + d * pdf)).astype(d.dtype, copy=False))

    return _make(out, (x,), backward)


def softmax(x, axis=-1):
    # in place on one buffer: attention scores are the largest activations
    p = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=axis, keepdims=True)

    def backward(g):
        gp = g * p
        gp -= p * gp.sum(axis=axis, keepdims=True)
        x._accumulate(gp)

    return _make(p, (x,), backward)


def log_softmax(x, axis=-1):
    d = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(d).sum(axis=axis, keepdims=True))
    out = d - lse

    def backward(g):
        p = np.exp(out)
        x._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), backward)


def cross_entropy(logits, target):
    """Mean of ``-log softmax(logits)[target]`` over all leading positions.

    ``logits`` is (..., C), ``target`` an integer array of shape (...).
    """
    target = np.asarray(target, dtype=np.int64)
    C = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= C):
        raise ValueError(f"target index out of range [0, {C})")
    z = logits.data.reshape(-1, C)
    t = target.reshape(-1)
    n = z.shape[0]
    if n == 0:
        raise ValueError("cross_entropy over an empty set")
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(s)
    loss = -logp[np.arange(n), t].mean()

    def backward(g):
        p = e / s
        p[np.arange(n), t] -= 1.0
        logits._accumulate((g * p / n).reshape(logits.shape).astype(logits.dtype, copy=False))

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def layer_norm(x, weight=None, bias=None, eps=1e-5):
    """Normalise over the last axis, then optional elementwise affine."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        if weight is not None and weight.requires_grad:
            weight._accumulate((g * xhat).sum(axis=lead))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=lead))
        if x.requires_grad:
            gx = g * weight.data if weight is not None else g
            n = d.shape[-1]
            dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                         - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
            x._accumulate(dx)

    parents = [x] + [p for p in (weight, bias) if p is not None]
    return _make(out, parents, backward)


def group_norm(x, num_groups, weight=None, bias=None, eps=1e-5):
    """GroupNorm on (N, C, L) with per-channel affine."""
    N, C, L = x.shape
    if C % num_groups:
        raise ValueError(f"{C} channels not divisible into {num_groups} groups")
    d = x.data.reshape(N, num_groups, -1)
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).reshape(N, C, L)
    out = xhat
    if weight is not None:
        out = out * weight.data[None, :, None]
    if bias is not None:
        out = out + bias.data[None, :, None]

    def backward(g):
        if weight is not None and weight.requires_grad:
            weight._accumulate((g * xhat).sum(axis=(0, 2)))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gx = g * weight.data[None, :, None] if weight is not None else g
            gx = gx.reshape(N, num_groups, -1)
            xh = xhat.reshape(N, num_groups, -1)
            m = gx.shape[-1]
            dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                         - xh * (gx * xh).sum(axis=-1, keepdims=True) / m)
            x._accumulate(dx.reshape(N, C, L))

    parents = [x] + [p for p in (weight, bias) if p is not None]
    return _make(out, parents, backward)


def batch_norm(x, weight, bias, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """BatchNorm1d over (N, F).

    In training mode the batch statistics are used and the running buffers
    (plain ndarrays) are updated in place; in eval mode the running buffers
    define a fixed affine map.
    """
    d = x.data
    if training:
        if d.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2")
        mu = d.mean(axis=0)
        xc = d - mu
        var = (xc * xc).mean(axis=0)
        n = d.shape[0]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu = running_mean
        xc = d - mu
        var = running_var
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data

    def backward(g):
        if weight.requires_grad:
            weight._accumulate((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gx = g * weight.data
            if training:
                dx = rstd * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
            else:
                dx = gx * rstd
            x._accumulate(dx)

    return _make(out.astype(d.dtype, copy=False), (x, weight, bias), backward)


def conv1d(x, weight, bias=None, stride=1):
    """Valid (unpadded) 1-D convolution; x (N, Cin, L), weight (Cout, Cin, K)."""
    N, Cin, L = x.shape
    Cout, Cin_w, K = weight.shape
    if Cin != Cin_w:
        raise ValueError(f"conv1d: input has {Cin} channels, weight expects {Cin_w}")
    if L < K:
        raise ValueError(f"conv1d: input length {L} shorter than kernel {K}")
    Lout = (L - K) // stride + 1
    idx = np.arange(Lout)[:, None] * stride + np.arange(K)[None, :]  # (Lout, K)
    cols = x.data[:, :, idx]  # (N, Cin, Lout, K)
    cols2 = cols.transpose(0, 2, 1, 3).reshape(N * Lout, Cin * K)
    w2 = weight.data.reshape(Cout, Cin * K)
    out = cols2 @ w2.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(N, Lout, Cout).transpose(0, 2, 1)

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(N * Lout, Cout)
        if weight.requires_grad:
            weight._accumulate((g2.T @ cols2).reshape(Cout, Cin, K))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(N, Lout, Cin, K).transpose(0, 2, 1, 3)
            dx = np.zeros_like(x.data)
            if stride >= K:
                dx[:, :, idx] = dcols
            else:
                for k in range(K):
                    dx[:, :, k:k + stride * (Lout - 1) + 1:stride] += dcols[:, :, :, k]
            x._accumulate(dx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, backward)


def embedding(weight, indices):
    """Row lookup ``weight[indices]``."""
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, indices, g)
        weight._accumulate(full)

    return _make(weight.data[indices], (weight,), backward)


def dropout(x, p, rng, training):
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def backward(g):
        x._accumulate(g * keep)

    return _make(x.data * keep, (x,), backward)


def where_rows(mask, a, b):
    """Select rows of ``a`` where ``mask`` (shape a.shape[:-1]) is true, else ``b``.

    ``b`` may broadcast (e.g. a single learnable mask vector).
    """
    mask = np.asarray(mask, dtype=bool)[..., None]
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(mask, 0.0, g), b.shape))

    return _make(out, (a, b), backward)


__all__ = [
    "linear", "relu", "gelu", "softmax", "log_softmax", "cross_entropy",
    "layer_norm", "group_norm", "batch_norm", "conv1d", "embedding", "dropout",
    "where_rows", "matmul", "add",
]
