"""Batch norm, ReLU, pooling and the linear classifier head (forward + VJP).

All ops accept complex inputs so that Jacobian-vector products can be taken
by complex-step differentiation in the verification suite.
"""
from __future__ import annotations

import numpy as np

from .static_ops import extract_taps, output_size, scatter_taps
from .tensor import matmul

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm_forward(x, weight, bias, running_mean=None, running_var=None, eps=BN_EPS):
    """Per-channel batch norm over (B, H, W).

    Without running statistics the batch statistics are used (training
    mode).  Returns ``(y, cache)``; ``cache["batch_mean"]`` / ``["batch_var"]``
    carry the statistics needed for the running-average update.
    """
    axes = (0, 2, 3)
    if running_mean is None:
        mean = x.mean(axis=axes)
        xc = x - mean.reshape(1, -1, 1, 1)
        var = (xc * xc).mean(axis=axes)
        training = True
    else:
        mean, var = running_mean, running_var
        xc = x - mean.reshape(1, -1, 1, 1)
        training = False
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(1, -1, 1, 1)
    y = xhat * weight.reshape(1, -1, 1, 1) + bias.reshape(1, -1, 1, 1)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    cache = {"xhat": xhat, "inv": inv, "weight": weight, "training": training,
             "batch_mean": mean, "batch_var": var, "count": n}
    return y, cache


def batchnorm_vjp(cache, dy):
    xhat, inv, weight = cache["xhat"], cache["inv"], cache["weight"]
    axes = (0, 2, 3)
    dbias = dy.sum(axis=axes)
    dweight = (dy * xhat).sum(axis=axes)
    dxhat = dy * weight.reshape(1, -1, 1, 1)
    if cache["training"]:
        n = cache["count"]
        dx = (dxhat - dbias.reshape(1, -1, 1, 1) * weight.reshape(1, -1, 1, 1) / n
              - xhat * (dweight * weight).reshape(1, -1, 1, 1) / n)
        dx = dx * inv.reshape(1, -1, 1, 1)
    else:
        dx = dxhat * inv.reshape(1, -1, 1, 1)
    return dx, dweight, dbias


def update_running_stats(running_mean, running_var, cache, momentum=BN_MOMENTUM):
    """In-place exponential update; the variance estimate is unbiased."""
    n = cache["count"]
    unbiased = np.real(cache["batch_var"]) * n / max(n - 1, 1)
    running_mean *= 1.0 - momentum
    running_mean += momentum * np.real(cache["batch_mean"])
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased


def relu_forward(x):
    if np.iscomplexobj(x):
        return np.where(x.real > 0, x, 0)
    return np.maximum(x, 0)


def relu_vjp(x, dy):
    return dy * (x.real > 0)


def maxpool_forward(x, k=3, stride=2, padding=1):
    taps = extract_taps(x, k, stride, padding, fill=-np.inf)
    idx = np.argmax(taps.real, axis=2)[:, :, None]
    return np.take_along_axis(taps, idx, axis=2)[:, :, 0], idx


def maxpool_vjp(x_shape, idx, dy, k=3, stride=2, padding=1):
    b, c = x_shape[:2]
    cols = np.zeros((b, c, k * k) + dy.shape[2:], dtype=dy.dtype)
    np.put_along_axis(cols, idx, dy[:, :, None], axis=2)
    return scatter_taps(cols, x_shape, k, stride, padding)


def maxpool_output_shape(shape, k=3, stride=2, padding=1):
    b, c, h, w = shape
    return (b, c, output_size(h, k, stride, padding), output_size(w, k, stride, padding))


def avg_pool(x, s: int):
    """Non-overlapping s x s average pooling; H and W must be divisible by s."""
    if s == 1:
        return x
    b, c, h, w = x.shape
    if h % s or w % s:
        raise ValueError(f"spatial size {h}x{w} not divisible by pooling factor {s}")
    return x.reshape(b, c, h // s, s, w // s, s).mean(axis=(3, 5))


def avg_pool_vjp(dy, s: int):
    if s == 1:
        return dy
    return np.repeat(np.repeat(dy, s, axis=2), s, axis=3) / (s * s)


def linear_forward(x, weight, bias):
    """x [B, F], weight [out, F], bias [out]."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} vs weight {weight.shape}")
    return matmul(x, weight.T) + bias


def linear_vjp(x, weight, dy):
    return matmul(dy, weight), matmul(dy.T, x), dy.sum(axis=0)
