"""Stateful layers built on the functional ops.

Parameters are discovered by walking attributes in assignment order, so the
names returned by ``named_parameters`` are stable (``encoder.blocks.0.attn.qkv.weight``)
and double as checkpoint keys.
"""
from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .tensor import Tensor, default_dtype, matmul


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.asarray(data, dtype=default_dtype()), requires_grad=True)


class Module:
    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        """Name -> ndarray for parameters and buffers (copies)."""
        state = {n: p.data.copy() for n, p in self.named_parameters()}
        state.update({n: b.copy() for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [n for n in list(params) + list(buffers) if n not in state]
        unexpected = [n for n in state if n not in params and n not in buffers]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for n, p in params.items():
            if n in state:
                arr = np.asarray(state[n])
                if arr.shape != p.shape:
                    raise ValueError(f"{n}: shape {arr.shape} != {p.shape}")
                p.data = arr.astype(p.dtype, copy=True)
        for n, b in buffers.items():
            if n in state:
                b[...] = state[n]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = Parameter(_uniform(rng, (d_out, d_in), bound))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, stride, rng):
        bound = 1.0 / math.sqrt(c_in * kernel)
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel), bound))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride

    def forward(self, x):
        return F.conv1d(x, self.weight, self.bias, self.stride)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class GroupNorm(Module):
    def __init__(self, groups, channels, eps=1e-5):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.groups = groups
        self.eps = eps

    def forward(self, x):
        return F.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class BatchNorm1d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, dim, momentum=0.1, eps=1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim, dtype=default_dtype())
        self.running_var = np.ones(dim, dtype=default_dtype())
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class MultiHeadAttention(Module):
    """Self-attention with layer-normalised queries and keys.

    softmax(LN(Q) LN(K)^T / sqrt(d_head)) V per head, then an output projection.
    """

    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = dim // heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.q_norm = LayerNorm(self.d_head)
        self.k_norm = LayerNorm(self.d_head)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x):
        B, T, D = x.shape
        if D != self.heads * self.d_head:
            raise ValueError(f"attention: token dim {D} != {self.heads}x{self.d_head}")
        qkv = self.qkv(x).reshape(B, T, 3, self.heads, self.d_head).transpose(2, 0, 3, 1, 4)
        q = self.q_norm(qkv[0])
        k = self.k_norm(qkv[1])
        v = qkv[2]
        scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.d_head))
        attn = F.softmax(scores, axis=-1)
        ctx = matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, T, D)
        return self.proj(ctx)


class Mlp(Module):
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim, heads, mlp_ratio, rng, dropout=0.0):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(round(dim * mlp_ratio)), rng)
        self.dropout = dropout
        self.rng = None

    def forward(self, x):
        h = self.attn(self.norm1(x))
        h = F.dropout(h, self.dropout, self.rng, self.training and self.rng is not None)
        x = x + h
        h = self.mlp(self.norm2(x))
        h = F.dropout(h, self.dropout, self.rng, self.training and self.rng is not None)
        return x + h
