"""Differentiable layer primitives built on :mod:`o2cta.nn.tensor`.

3D feature maps are channels-last: ``(B, Z, Y, X, C)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import DTYPE, Tensor, as_tensor, make


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make(s, (x,), bw)


def log_softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels, mask=None):
    """Mean negative log-likelihood over positions where ``mask`` is true.

    ``logits`` has shape ``(..., C)``; ``labels`` and ``mask`` match the
    leading dimensions. Masked positions may hold any label value.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    mask = np.ones(labels.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ShapeError("cross_entropy: every position is masked")
    safe = np.where(mask, labels, 0)
    logp = log_softmax_np(logits.data)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe[..., None], np.take_along_axis(p, safe[..., None], -1) - 1.0, -1)
        return (g * p * (mask[..., None] / count),)

    return make(np.asarray(loss), (logits,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    if gamma.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} for features {x.shape[-1]}")

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def dropout(x, rate, rng, training):
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make(x.data * keep, (x,), lambda g: (g * keep,))


def _im2col(xp, k):
    """``(B, Z+k-1, Y+k-1, X+k-1, C)`` -> ``(B*Z*Y*X, k^3*C)``, offset-major columns."""
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    b, z, y, x, c = win.shape[:5]
    # channels innermost keeps the copy mostly contiguous
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4))
    return cols.reshape(b * z * y * x, k * k * k * c), (b, z, y, x)


def conv3d(x, w, b):
    """Stride-1, zero-padded ("same") 3D convolution.

    ``x``: ``(B, Z, Y, X, Cin)``; ``w``: ``(Cin, k, k, k, Cout)`` with odd
    ``k``; ``b``: ``(Cout,)``.
    """
    if x.ndim != 5 or w.ndim != 5 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with weight {w.shape}")
    k = w.shape[1]
    if k % 2 == 0 or w.shape[1:4] != (k, k, k):
        raise ShapeError(f"conv3d: kernel must be cubic with odd size, got {w.shape[1:4]}")
    if b.shape != (w.shape[-1],):
        raise ShapeError(f"conv3d: bias {b.shape} for {w.shape[-1]} output channels")
    p = k // 2
    cin, cout = w.shape[0], w.shape[-1]
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p), (0, 0))) if p else x.data
    cols, (bn, z, y, xx) = _im2col(xp, k)
    wmat = w.data.transpose(1, 2, 3, 0, 4).reshape(k * k * k * cin, cout)
    out = (cols @ wmat + b.data).reshape(bn, z, y, xx, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(k, k, k, cin, cout).transpose(3, 0, 1, 2, 4)
        gb = g2.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            # one small matmul per kernel offset, accumulated into the shifted window
            wk = w.data.reshape(cin, k * k * k, cout).transpose(1, 2, 0)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            o = 0
            for dz in range(k):
                for dy in range(k):
                    for dx in range(k):
                        gxp[:, dz:dz + z, dy:dy + y, dx:dx + xx, :] += g @ wk[o]
                        o += 1
            gx = gxp[:, p:p + z, p:p + y, p:p + xx, :] if p else gxp
        return gx, gw, gb

    return make(out, (x, w, b), bw)


def maxpool3d(x, size=2):
    """Non-overlapping max pooling; trailing remainders are dropped.

    The gradient goes to the first maximal element of each block.
    """
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d: expected (B, Z, Y, X, C), got {x.shape}")
    bn, z, y, xx, c = x.shape
    z2, y2, x2 = z // size, y // size, xx // size
    if min(z2, y2, x2) < 1:
        raise ShapeError(f"maxpool3d: spatial size {x.shape[1:4]} smaller than pool {size}")
    offsets = [(a, b_, c_) for a in range(size) for b_ in range(size) for c_ in range(size)]

    def view(arr, off):
        a, b_, c_ = off
        return arr[:, a:z2 * size:size, b_:y2 * size:size, c_:x2 * size:size, :]

    out = view(x.data, offsets[0]).copy()
    arg = np.zeros(out.shape, dtype=np.int8)
    for i, off in enumerate(offsets[1:], start=1):
        cand = view(x.data, off)
        better = cand > out
        np.copyto(out, cand, where=better)
        arg[better] = i

    def bw(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        for i, off in enumerate(offsets):
            view(gx, off)[...] = np.where(arg == i, g, 0.0)
        return (gx,)

    return make(out, (x,), bw)


def scatter_rows(x, index, n_rows):
    """Place rows of ``x`` (``(M, F)``) at ``index`` of a zero ``(n_rows, F)`` array."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError(f"scatter_rows: {x.shape} rows with index {index.shape}")
    out = np.zeros((n_rows, x.shape[1]), dtype=DTYPE)
    out[index] = x.data
    return make(out, (x,), lambda g: (g[index],))


def positional_encoding(length, d_model):
    """Sinusoidal encoding, ``(length, d_model)``."""
    pos = np.arange(length, dtype=DTYPE)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def key_padding_bias(mask):
    """``(B, L)`` validity mask -> additive ``(B, 1, 1, L)`` bias of 0 / -inf."""
    mask = np.asarray(mask, dtype=bool)
    return Tensor(np.where(mask, 0.0, -np.inf)[:, None, None, :])
