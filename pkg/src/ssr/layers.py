"""Hand-derived forward/backward passes for the projection-head layers.

Every forward returns (out, cache); every backward consumes (dout, cache).
All math is float64.
"""

from __future__ import annotations

import numpy as np


def linear_forward(x, w, b):
    # x: [n, d_in], w: [d_out, d_in], b: [d_out]
    out = x @ w.T + b
    return out, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    dx = dout @ w
    dw = dout.T @ x
    db = dout.sum(axis=0)
    return dx, dw, db


def relu_forward(x):
    out = np.maximum(x, 0.0)
    return out, (x > 0)


def relu_backward(dout, cache):
    return dout * cache


def batchnorm_forward(x, gamma, beta, running_mean, running_var, momentum, eps, mode):
    """BN over axis 0. Train mode uses (biased) batch statistics and updates
    the running stats in place; eval mode uses the running stats."""
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError(f"batch norm in train mode needs n >= 2, got n={x.shape[0]}")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    elif mode == "eval":
        mean = running_mean
        var = running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, gamma, mode, x.shape[0])


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, mode, n = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    if mode == "eval":
        dx = dxhat * inv_std
    else:
        # batch statistics participate in the forward pass
        dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def l2_normalize_forward(x, eps=1e-12):
    # row-wise y = x / ||x||
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x / norm
    return y, (y, norm)


def l2_normalize_backward(dout, cache):
    y, norm = cache
    return (dout - y * (dout * y).sum(axis=1, keepdims=True)) / norm
