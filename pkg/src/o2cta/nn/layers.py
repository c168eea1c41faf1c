"""Parameterized layers. Parameters are initialized uniform in +-1/sqrt(fan_in)."""
from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .tensor import Tensor, matmul, relu


class Module:
    """Minimal container: parameters are discovered in attribute order."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

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

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, shape, fan_in, name):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        self.weight = _uniform(rng, (n_in, n_out), n_in, "weight")
        self.bias = _uniform(rng, (n_out,), n_in, "bias")

    def forward(self, x):
        return matmul(x, self.weight) + self.bias


class Conv3d(Module):
    def __init__(self, c_in, c_out, rng, kernel=3):
        fan_in = c_in * kernel ** 3
        self.weight = _uniform(rng, (c_in, kernel, kernel, kernel, c_out), fan_in, "weight")
        self.bias = _uniform(rng, (c_out,), fan_in, "bias")

    def forward(self, x):
        return F.conv3d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True, name="gamma")
        self.beta = Tensor(np.zeros(dim), requires_grad=True, name="beta")
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, d_model, heads, rng):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)

    def _split(self, x, b, n):
        return x.reshape(b, n, self.heads, -1).transpose(0, 2, 1, 3)

    def forward(self, x, bias=None):
        b, n, d = x.shape
        dh = d // self.heads
        q = self._split(self.q(x), b, n)
        k = self._split(self.k(x), b, n)
        v = self._split(self.v(x), b, n)
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        if bias is not None:
            scores = scores + bias
        attn = F.softmax(scores, axis=-1)
        ctx = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.out(ctx)


class EncoderLayer(Module):
    """Pre-norm Transformer encoder block."""

    def __init__(self, d_model, heads, d_ff, dropout, rng):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ff1 = Linear(d_model, d_ff, rng)
        self.ff2 = Linear(d_ff, d_model, rng)
        self.dropout = dropout
        self.rng = rng

    def forward(self, x, bias=None):
        h = self.attn(self.norm1(x), bias)
        x = x + F.dropout(h, self.dropout, self.rng, self.training)
        h = self.ff2(relu(self.ff1(self.norm2(x))))
        return x + F.dropout(h, self.dropout, self.rng, self.training)
