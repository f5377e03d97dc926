"""Vanilla, depthwise and pointwise 2-D convolution with hand-written VJPs.

The fast path is im2col followed by a (grouped) matrix product.  The
reduction index is ordered (input channel, kernel row, kernel column), which
is also the order used by the direct-summation oracles in ``dcdc.oracles``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import batched_matmul, pad_zero


@dataclass
class ConvWeights:
    weight: np.ndarray  # [C_out, C_in / groups, k, k]
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int | None = None  # None -> k // 2
    groups: int = 1

    def __post_init__(self):
        c_out, _, kh, kw = self.weight.shape
        if kh != kw:
            raise ValueError("only square kernels are supported")
        if kh % 2 == 0:
            raise ValueError(f"even kernel size {kh} is not supported")
        if self.padding is None:
            self.padding = kh // 2
        if self.stride < 1 or self.groups < 1 or self.padding < 0:
            raise ValueError("stride/groups must be >= 1 and padding >= 0")
        if c_out % self.groups:
            raise ValueError("C_out must be divisible by groups")
        if self.bias is not None and self.bias.shape != (c_out,):
            raise ValueError("bias length must equal C_out")

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


def output_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded input {n + 2 * padding}")
    return span // stride + 1


def extract_taps(x: np.ndarray, k: int, stride: int, padding: int, fill: float = 0.0) -> np.ndarray:
    """im2col: [B, C, H, W] -> [B, C, k*k, H', W'] (tap t = i*k + j)."""
    b, c, h, w = x.shape
    ho, wo = output_size(h, k, stride, padding), output_size(w, k, stride, padding)
    if fill == 0.0:
        xp = pad_zero(x, padding)
    else:
        xp = np.full((b, c, h + 2 * padding, w + 2 * padding), fill, dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x
    cols = np.empty((b, c, k * k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i * k + j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                                          j:j + stride * (wo - 1) + 1:stride]
    return cols


def scatter_taps(cols: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    """col2im: adjoint of :func:`extract_taps`."""
    b, c, h, w = x_shape
    ho, wo = cols.shape[-2:]
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * (ho - 1) + 1:stride,
               j:j + stride * (wo - 1) + 1:stride] += cols[:, :, i * k + j]
    return xp[:, :, padding:padding + h, padding:padding + w].copy()


def _check_input(x: np.ndarray, w: ConvWeights):
    if x.ndim != 4 or x.shape[1] != w.in_channels:
        raise ValueError(f"input {x.shape} incompatible with weights {w.weight.shape} (groups={w.groups})")


def _grouped_cols(cols: np.ndarray, g: int) -> np.ndarray:
    # [B, C, kk, Ho, Wo] -> [g, B*Ho*Wo, (C/g)*kk]
    b, c, kk, ho, wo = cols.shape
    a = cols.reshape(b, g, c // g, kk, ho * wo).transpose(1, 0, 4, 2, 3)
    return a.reshape(g, b * ho * wo, (c // g) * kk)


def conv2d_forward(x: np.ndarray, w: ConvWeights) -> np.ndarray:
    _check_input(x, w)
    b = x.shape[0]
    g, k = w.groups, w.k
    cols = extract_taps(x, k, w.stride, w.padding)
    ho, wo = cols.shape[-2:]
    a = _grouped_cols(cols, g)
    c_out = w.out_channels
    wm = w.weight.reshape(g, c_out // g, -1).transpose(0, 2, 1)
    out = batched_matmul(a, wm)  # [g, B*Ho*Wo, C_out/g]
    y = out.reshape(g, b, ho, wo, c_out // g).transpose(1, 0, 4, 2, 3).reshape(b, c_out, ho, wo)
    if w.bias is not None:
        y = y + w.bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(y)


def conv2d_vjp(x: np.ndarray, w: ConvWeights, dy: np.ndarray):
    """Returns (dx, dweight, dbias); dbias is None when the layer has no bias."""
    _check_input(x, w)
    b = x.shape[0]
    g, k = w.groups, w.k
    c_out = w.out_channels
    cols = extract_taps(x, k, w.stride, w.padding)
    ho, wo = cols.shape[-2:]
    if dy.shape != (b, c_out, ho, wo):
        raise ValueError(f"dy shape {dy.shape} != output shape {(b, c_out, ho, wo)}")
    a = _grouped_cols(cols, g)                                   # [g, M, K]
    dyg = dy.reshape(b, g, c_out // g, ho * wo).transpose(1, 0, 3, 2).reshape(g, b * ho * wo, c_out // g)
    dw = batched_matmul(a.transpose(0, 2, 1), dyg)               # [g, K, C_out/g]
    dweight = dw.transpose(0, 2, 1).reshape(w.weight.shape)
    wm = w.weight.reshape(g, c_out // g, -1)                     # [g, C_out/g, K]
    dcols = batched_matmul(dyg, wm)                              # [g, M, K]
    c = x.shape[1]
    dcols = dcols.reshape(g, b, ho, wo, c // g, k * k).transpose(1, 0, 4, 5, 2, 3)
    dx = scatter_taps(dcols.reshape(b, c, k * k, ho, wo), x.shape, k, w.stride, w.padding)
    dbias = dy.sum(axis=(0, 2, 3)) if w.bias is not None else None
    return dx, dweight, dbias


def depthwise_forward(x: np.ndarray, weight: np.ndarray, stride: int = 1, bias=None) -> np.ndarray:
    """One k x k filter per channel; ``weight`` is [C, 1, k, k]."""
    return conv2d_forward(x, ConvWeights(weight, bias, stride, None, groups=x.shape[1]))


def depthwise_vjp(x, weight, dy, stride: int = 1, bias=None):
    return conv2d_vjp(x, ConvWeights(weight, bias, stride, None, groups=x.shape[1]), dy)


def pointwise_forward(x: np.ndarray, weight: np.ndarray, bias=None, stride: int = 1) -> np.ndarray:
    """1x1 convolution; ``weight`` is [C_out, C_in] or [C_out, C_in, 1, 1]."""
    weight = weight.reshape(weight.shape[0], -1, 1, 1)
    return conv2d_forward(x, ConvWeights(weight, bias, stride, 0))


def pointwise_vjp(x, weight, dy, bias=None, stride: int = 1):
    shape = weight.shape
    dx, dw, db = conv2d_vjp(x, ConvWeights(weight.reshape(shape[0], -1, 1, 1), bias, stride, 0), dy)
    return dx, dw.reshape(shape), db
