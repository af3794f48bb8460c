"""Differentiable operations beyond elementwise arithmetic.

The heavier kernels (layer norm, softmax, the bidirectional LSTM recurrence,
frame gather/scatter) are fused: each is a single tape node with a hand-written
backward pass, which keeps the Python overhead per training step small.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .tensor import Tensor, _sigmoid

LAYER_NORM_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return Tensor._make(xd * cdf, (x,), backward)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    xd = x.data
    n = xd.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"gamma/beta must have shape ({n},), got {gamma.shape} and {beta.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = x @ weight
    return y if bias is None else y + bias


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def pad_tail(x: Tensor, amount: int, axis: int = 0) -> Tensor:
    """Append ``amount`` zeros along ``axis``."""
    if amount == 0:
        return x
    axis = axis % x.ndim
    widths = [(0, 0)] * x.ndim
    widths[axis] = (0, amount)
    n = x.shape[axis]
    index = tuple(slice(0, n) if i == axis else slice(None) for i in range(x.ndim))
    return Tensor._make(np.pad(x.data, widths), (x,), lambda g: (g[index],))


def unfold(x: Tensor, size: int, hop: int, count: int) -> Tensor:
    """Gather overlapping windows along axis -2.

    ``x`` has shape (..., N, F) with ``N >= hop*(count-1) + size``; the result
    has shape (..., size, count, F) with ``out[..., k, s, :] = x[..., s*hop + k, :]``.
    """
    n = x.shape[-2]
    if hop * (count - 1) + size > n:
        raise ValueError(f"{count} windows of {size} at hop {hop} exceed length {n}")
    out = _gather_windows(x.data, size, hop, count)

    def backward(g):
        return (_scatter_windows(g, hop, n),)

    return Tensor._make(out, (x,), backward)


def fold(x: Tensor, hop: int, length: int) -> Tensor:
    """Sum windows of shape (..., size, count, F) back onto (..., length, F)."""
    size, count = x.shape[-3], x.shape[-2]
    if hop * (count - 1) + size > length:
        raise ValueError(f"{count} windows of {size} at hop {hop} exceed length {length}")
    out = _scatter_windows(x.data, hop, length)

    def backward(g):
        return (_gather_windows(g, size, hop, count),)

    return Tensor._make(out, (x,), backward)


def _gather_windows(x: np.ndarray, size: int, hop: int, count: int) -> np.ndarray:
    lead = x.shape[:-2]
    out = np.empty(lead + (size, count, x.shape[-1]), dtype=x.dtype)
    span = hop * (count - 1) + 1
    for k in range(size):
        out[..., k, :, :] = x[..., k:k + span:hop, :]
    return out


def _scatter_windows(x: np.ndarray, hop: int, length: int) -> np.ndarray:
    size, count = x.shape[-3], x.shape[-2]
    out = np.zeros(x.shape[:-3] + (length, x.shape[-1]), dtype=x.dtype)
    span = hop * (count - 1) + 1
    for k in range(size):
        out[..., k:k + span:hop, :] += x[..., k, :, :]
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy between ``sigmoid(logits)`` and ``targets``."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    if t.shape != z.shape:
        raise ValueError(f"targets shape {t.shape} != logits shape {z.shape}")
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        return (g * (_sigmoid(z) - t) / n,)

    return Tensor._make(np.asarray(per.mean()), (logits,), backward)


def bilstm(x: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Tensor:
    """Bidirectional LSTM over axis 1 of ``x`` (batch, time, features).

    Weights are stacked per direction: ``w_ih`` (2, 4H, F), ``w_hh`` (2, 4H, H),
    ``bias`` (2, 4H), gate order (input, forget, cell, output).  States start
    at zero.  Returns (batch, time, 2H) with the forward direction first.
    """
    xd = x.data
    B, T, _ = xd.shape
    H = w_hh.shape[-1]
    W_ih, W_hh, b = w_ih.data, w_hh.data, bias.data
    dtype = np.result_type(xd, W_ih)

    # direction 1 runs on the time-reversed input so both share one loop index
    xs = np.stack([xd, xd[:, ::-1]])                       # (2, B, T, F)
    gx = np.matmul(xs, np.swapaxes(W_ih, 1, 2)[:, None]) + b[:, None, None, :]
    W_hh_t = np.swapaxes(W_hh, 1, 2)                        # (2, H, 4H)

    h = np.zeros((2, B, H), dtype=dtype)
    c = np.zeros((2, B, H), dtype=dtype)
    hs = np.empty((T, 2, B, H), dtype=dtype)
    cs = np.empty((T, 2, B, H), dtype=dtype)
    acts = np.empty((T, 2, B, 4 * H), dtype=dtype)
    for t in range(T):
        pre = gx[:, :, t] + np.matmul(h, W_hh_t)
        a = np.empty_like(pre)
        a[..., :2 * H] = _sigmoid(pre[..., :2 * H])
        a[..., 2 * H:3 * H] = np.tanh(pre[..., 2 * H:3 * H])
        a[..., 3 * H:] = _sigmoid(pre[..., 3 * H:])
        i, f, g, o = a[..., :H], a[..., H:2 * H], a[..., 2 * H:3 * H], a[..., 3 * H:]
        c = f * c + i * g
        h = o * np.tanh(c)
        acts[t], hs[t], cs[t] = a, h, c

    out = np.concatenate([hs[:, 0].transpose(1, 0, 2), hs[::-1, 1].transpose(1, 0, 2)], axis=-1)

    def backward(gout):
        gh_all = np.stack([gout[:, :, :H], gout[:, ::-1, H:]])  # (2, B, T, H) in loop time
        dgx = np.empty((2, B, T, 4 * H), dtype=dtype)
        dW_hh = np.zeros_like(W_hh)
        dh = np.zeros((2, B, H), dtype=dtype)
        dc = np.zeros((2, B, H), dtype=dtype)
        zeros = np.zeros((2, B, H), dtype=dtype)
        for t in range(T - 1, -1, -1):
            a = acts[t]
            i, f, g, o = a[..., :H], a[..., H:2 * H], a[..., 2 * H:3 * H], a[..., 3 * H:]
            c_prev = cs[t - 1] if t > 0 else zeros
            h_prev = hs[t - 1] if t > 0 else zeros
            tc = np.tanh(cs[t])
            dh = dh + gh_all[:, :, t]
            dc = dc + dh * o * (1.0 - tc * tc)
            dpre = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                dh * tc * o * (1.0 - o),
            ], axis=-1)
            dgx[:, :, t] = dpre
            dW_hh += np.matmul(np.swapaxes(dpre, 1, 2), h_prev)
            dh = np.matmul(dpre, W_hh)
            dc = dc * f
        gx_in = gw_ih = gb = None
        if x.requires_grad:
            dxs = np.matmul(dgx, W_ih[:, None])               # (2, B, T, F)
            gx_in = dxs[0] + dxs[1][:, ::-1]
        if w_ih.requires_grad:
            gw_ih = np.matmul(np.swapaxes(dgx.reshape(2, B * T, 4 * H), 1, 2), xs.reshape(2, B * T, -1))
        if bias.requires_grad:
            gb = dgx.sum(axis=(1, 2))
        return gx_in, gw_ih, (dW_hh if w_hh.requires_grad else None), gb

    return Tensor._make(out, (x, w_ih, w_hh, bias), backward)


def clamp_passthrough(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero wherever the clamp is active."""
    xd = x.data
    inside = (xd > lo) & (xd < hi)
    return Tensor._make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))
