"""Forward/backward primitives.  Every forward returns (output, cache); the
matching backward takes (grad_output, cache) and returns the input gradient
plus a dict of parameter gradients where applicable."""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5


def linear(x, w, b):
    return x @ w + b, x


def linear_back(dy, x, w, need_dx=True):
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dy.reshape(-1, dy.shape[-1])
    return (dy @ w.T if need_dx else None), x2.T @ d2, d2.sum(axis=0)


def layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xh = xc * inv
    return xh * g + b, (xh, inv)


def layernorm_back(dy, cache, g):
    xh, inv = cache
    d = dy.shape[-1]
    dg = (dy * xh).reshape(-1, d).sum(axis=0)
    db = dy.reshape(-1, d).sum(axis=0)
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
    return dx, dg, db


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_back(dy, mask):
    return dy * mask


def dropout(x, p, rng, train):
    if not train or p <= 0.0:
        return x, None
    mask = ((rng.random(x.shape) >= p) / (1.0 - p)).astype(x.dtype)
    return x * mask, mask


def dropout_back(dy, mask):
    return dy if mask is None else dy * mask


def softmax(s):
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_back(da, a):
    return a * (da - (da * a).sum(axis=-1, keepdims=True))


# ----------------------------------------------------------------------------
# 3x3 stride-2 pad-1 convolution, channel-last, via im2col


def _out_size(n):
    return (n + 2 - 3) // 2 + 1


def conv3s2(x, w, b):
    """x (B, H, W, C), w (9*C, C_out) with rows ordered (ki, kj, c)."""
    bsz, h, wd, c = x.shape
    ho, wo = _out_size(h), _out_size(wd)
    xp = np.zeros((bsz, h + 2, wd + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((bsz, ho, wo, 9, c), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, :, ki * 3 + kj, :] = xp[:, ki:ki + 2 * ho - 1:2, kj:kj + 2 * wo - 1:2, :]
    cols = cols.reshape(bsz * ho * wo, 9 * c)
    y = (cols @ w + b).reshape(bsz, ho, wo, -1)
    return y, (cols, x.shape)


def conv3s2_back(dy, cache, w, need_dx=True):
    cols, shape = cache
    bsz, h, wd, c = shape
    ho, wo = dy.shape[1], dy.shape[2]
    d2 = dy.reshape(-1, dy.shape[-1])
    dw = cols.T @ d2
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.T).reshape(bsz, ho, wo, 9, c)
    dxp = np.zeros((bsz, h + 2, wd + 2, c), dtype=dy.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + 2 * ho - 1:2, kj:kj + 2 * wo - 1:2, :] += dcols[:, :, :, ki * 3 + kj, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db
