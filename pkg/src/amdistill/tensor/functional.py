"""Composite and fused operations: convolution, batch norm, pooling, softmax."""
from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import (
    ShapeError,
    Tensor,
    _make,
    expand,
    matmul,
    reduce,
    stack,
    transpose,
)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (n, c, h, w) with ``kernel`` (o, c, kh, kw).

    Implemented as im2col followed by a single matrix product; the adjoint for
    the input scatters the column gradient back window by window.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    # channels-last internally so window scatters touch contiguous memory
    xd = x.data.transpose(0, 2, 3, 1)
    if padding:
        xd = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xd, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = (cols @ wmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        gk = None
        if kernel.requires_grad:
            gk = np.ascontiguousarray((gm.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, oh, ow, kh, kw, c)
            dxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dcols[:, :, :, i, j, :]
            if padding:
                dxp = dxp[:, padding:padding + h, padding:padding + w, :]
            gx = np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))
        return gx, gk

    return _make(np.ascontiguousarray(out), (x, kernel), bw, "conv2d")


def batch_norm2d(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = 0.9,
                 eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over (n, h, w).

    In training mode the running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch_stat`` (variance
    unbiased); in eval mode they are used as-is.
    """
    n, c, h, w = x.shape
    xd = x.data
    count = n * h * w
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(1, c, 1, 1).astype(xd.dtype)) * inv.reshape(1, c, 1, 1)
    out = xhat * weight.data.reshape(1, c, 1, 1) + bias.data.reshape(1, c, 1, 1)

    def bw(g):
        gw = (g * xhat).sum(axis=(0, 2, 3)) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * weight.data.reshape(1, c, 1, 1)
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv.reshape(1, c, 1, 1) / count * (count * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv.reshape(1, c, 1, 1)
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw, "batch_norm2d")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"spatial size {h}x{w} not divisible by pool size {k}")
    return reduce("mean", x.reshape(n, c, h // k, k, w // k, k), (3, 5))


def global_avg_pool(x: Tensor) -> Tensor:
    return reduce("mean", x, (2, 3))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = out + expand(bias, out.shape)
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    lse = reduce("logsumexp", x, axis, keepdims=True)
    return x - expand(lse, x.shape)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(x, axis).exp()


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise log(e^a + e^b), evaluated through a shifted logsumexp."""
    return reduce("logsumexp", stack([a, b], axis=0), 0)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
