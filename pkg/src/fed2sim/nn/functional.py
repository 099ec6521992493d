"""Stateless forward/backward kernels. All arrays are float64, NCHW for images.

Convolutions are stride 1 with zero padding ``k // 2`` so spatial size is kept.
"""
from __future__ import annotations

import numpy as np

Bounds = list[tuple[int, int]]


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Gather the k x k neighbourhoods of ``x`` into ``[C, k, k, B, H, W]``."""
    b, c, h, w = x.shape
    p = k // 2
    xt = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))).transpose(1, 0, 2, 3) if p else x.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, b, h, w))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + h, j:j + w]
    return cols


def col2im(dcols: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`im2col`; returns ``[B, C, H, W]``."""
    c, b = dcols.shape[0], dcols.shape[3]
    p = k // 2
    dxp = np.zeros((c, b, h + 2 * p, w + 2 * p))
    # fixed loop order keeps the accumulation deterministic
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += dcols[:, i, j]
    return dxp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)


def group_conv_forward(x, weights, biases, in_bounds: Bounds):
    """Grouped convolution. ``weights[g]`` is ``[out_g, in_g, k, k]``.

    Output channels of group g only see input channels ``in_bounds[g]``.
    Returns ``(out, cols)`` where ``cols`` is kept for the backward pass.
    """
    b, _, h, w = x.shape
    k = weights[0].shape[-1]
    cols = im2col(x, k)
    outs = []
    for wg, bg, (a, e) in zip(weights, biases, in_bounds):
        cg = cols[a:e].reshape((e - a) * k * k, b * h * w)
        outs.append(wg.reshape(wg.shape[0], -1) @ cg + bg[:, None])
    out = np.concatenate(outs, axis=0).reshape(-1, b, h, w).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def group_conv_backward(dout, cols, weights, in_bounds: Bounds, out_bounds: Bounds, in_channels: int):
    b, _, h, w = dout.shape
    k = weights[0].shape[-1]
    d = dout.transpose(1, 0, 2, 3).reshape(dout.shape[1], b * h * w)
    dcols = np.zeros_like(cols)
    dws, dbs = [], []
    for wg, (a, e), (oa, oe) in zip(weights, in_bounds, out_bounds):
        dg = d[oa:oe]
        cg = cols[a:e].reshape((e - a) * k * k, b * h * w)
        dws.append((dg @ cg.T).reshape(wg.shape))
        dbs.append(dg.sum(axis=1))
        dcols[a:e] += (wg.reshape(wg.shape[0], -1).T @ dg).reshape(e - a, k, k, b, h, w)
    dx = col2im(dcols, k, h, w)
    return np.ascontiguousarray(dx), dws, dbs


def group_dense_forward(x, weights, biases, in_bounds: Bounds):
    """Block-diagonal dense layer. ``weights[g]`` is ``[out_g, in_g]``."""
    outs = [x[:, a:e] @ wg.T + bg for wg, bg, (a, e) in zip(weights, biases, in_bounds)]
    return np.concatenate(outs, axis=1)


def group_dense_backward(dout, x, weights, in_bounds: Bounds, out_bounds: Bounds):
    dx = np.zeros_like(x)
    dws, dbs = [], []
    for wg, (a, e), (oa, oe) in zip(weights, in_bounds, out_bounds):
        dg = dout[:, oa:oe]
        dws.append(dg.T @ x[:, a:e])
        dbs.append(dg.sum(axis=0))
        dx[:, a:e] += dg @ wg
    return dx, dws, dbs


def group_norm_forward(x, scale, shift, bounds: Bounds, eps: float = 1e-5):
    """Normalise each sample over every channel range in ``bounds`` (and all spatial positions)."""
    b = x.shape[0]
    y = np.empty_like(x)
    stats = []
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    for a, e in bounds:
        xs = x[:, a:e].reshape(b, -1)
        mu = xs.mean(axis=1, keepdims=True)
        var = ((xs - mu) ** 2).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = ((xs - mu) * inv).reshape(x[:, a:e].shape)
        y[:, a:e] = xhat * scale[a:e].reshape(bshape) + shift[a:e].reshape(bshape)
        stats.append((xhat, inv))
    return y, stats


def group_norm_backward(dout, stats, scale, bounds: Bounds):
    b = dout.shape[0]
    dx = np.empty_like(dout)
    red = (0,) + tuple(range(2, dout.ndim))
    bshape = (1, -1) + (1,) * (dout.ndim - 2)
    dscale = np.empty_like(scale)
    dshift = np.empty_like(scale)
    for (a, e), (xhat, inv) in zip(bounds, stats):
        dg = dout[:, a:e]
        dscale[a:e] = (dg * xhat).sum(axis=red)
        dshift[a:e] = dg.sum(axis=red)
        dxh = (dg * scale[a:e].reshape(bshape)).reshape(b, -1)
        xh = xhat.reshape(b, -1)
        m = dxh.shape[1]
        dxs = inv / m * (m * dxh - dxh.sum(axis=1, keepdims=True)
                         - xh * (dxh * xh).sum(axis=1, keepdims=True))
        dx[:, a:e] = dxs.reshape(dg.shape)
    return dx, dscale, dshift


def batch_norm_forward(x, scale, shift, eps: float = 1e-5):
    """Per-channel normalisation over batch and spatial axes (batch statistics)."""
    red = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    mu = x.mean(axis=red, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * scale.reshape(bshape) + shift.reshape(bshape), (xhat, inv)


def batch_norm_backward(dout, stat, scale):
    xhat, inv = stat
    red = (0,) + tuple(range(2, dout.ndim))
    bshape = (1, -1) + (1,) * (dout.ndim - 2)
    m = dout.size // dout.shape[1]
    dscale = (dout * xhat).sum(axis=red)
    dshift = dout.sum(axis=red)
    dxh = dout * scale.reshape(bshape)
    dx = inv / m * (m * dxh - dxh.sum(axis=red, keepdims=True)
                    - xhat * (dxh * xhat).sum(axis=red, keepdims=True))
    return dx, dscale, dshift


def avg_pool_forward(x, size: int):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // size, size, w // size, size).mean(axis=(3, 5))


def avg_pool_backward(dout, size: int):
    return np.repeat(np.repeat(dout, size, axis=2), size, axis=3) / (size * size)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    b = logits.shape[0]
    lsm = log_softmax(logits)
    loss = -lsm[np.arange(b), labels].mean()
    d = np.exp(lsm)
    d[np.arange(b), labels] -= 1.0
    return float(loss), d / b
