"""Direct-summation reference implementations.

Scalar Python loops written straight from the defining sums, with no im2col,
reshaping tricks or BLAS.  Slow; used only to check the fast paths.
Accumulation starts at 0.0 and visits terms in ascending (channel, row,
column) order, so in float64 the fast paths must agree bit for bit.
"""
from __future__ import annotations

import math

import numpy as np


def matmul_naive(a, b):
    a, b = np.asarray(a), np.asarray(b)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    al, bl = a.tolist(), b.tolist()
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for kk in range(k):
                s += al[i][kk] * bl[kk][j]
            out[i][j] = s
    return np.array(out, dtype=np.result_type(a, b))


def conv2d_naive(x, weight, bias=None, stride=1, padding=None, groups=1):
    x, weight = np.asarray(x), np.asarray(weight)
    bsz, c_in, h, w = x.shape
    c_out, cg, k, _ = weight.shape
    p = k // 2 if padding is None else padding
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    per_group = c_out // groups
    X, W = x.tolist(), weight.tolist()
    bl = None if bias is None else np.asarray(bias).tolist()
    out = np.zeros((bsz, c_out, ho, wo), dtype=np.result_type(x, weight))
    for b in range(bsz):
        for n in range(c_out):
            g = n // per_group
            for oh in range(ho):
                for ow in range(wo):
                    s = 0.0
                    for mm in range(cg):
                        m = g * cg + mm
                        for i in range(k):
                            hi = oh * stride + i - p
                            if hi < 0 or hi >= h:
                                continue
                            for j in range(k):
                                wi = ow * stride + j - p
                                if 0 <= wi < w:
                                    s += X[b][m][hi][wi] * W[n][mm][i][j]
                    if bl is not None:
                        s += bl[n]
                    out[b, n, oh, ow] = s
    return out


def lsa_apply_naive(x, kernels, k, stride=1):
    """Y[b,n,h,w] = sum_(i,j) X[b, n, h*s+i-p, w*s+j-p] * K[b, g(n), i*k+j, h, w]."""
    x, kernels = np.asarray(x), np.asarray(kernels)
    bsz, c, h, w = x.shape
    _, groups, _, ho, wo = kernels.shape
    gs = c // groups
    p = k // 2
    X, K = x.tolist(), kernels.tolist()
    out = np.zeros((bsz, c, ho, wo), dtype=np.result_type(x, kernels))
    for b in range(bsz):
        for n in range(c):
            g = n // gs
            for oh in range(ho):
                for ow in range(wo):
                    s = 0.0
                    for i in range(k):
                        hi = oh * stride + i - p
                        if hi < 0 or hi >= h:
                            continue
                        for j in range(k):
                            wi = ow * stride + j - p
                            if 0 <= wi < w:
                                s += X[b][n][hi][wi] * K[b][g][i * k + j][oh][ow]
                    out[b, n, oh, ow] = s
    return out


def gsi_apply_naive(z, kernels, stride=1):
    """Per-sample dense conv: Y[b,n,h,w] = sum_(m,i,j) Z[b,m,.,.] * P[b,n,m,i,j]."""
    z, kernels = np.asarray(z), np.asarray(kernels)
    bsz, m_in, h, w = z.shape
    _, m_out, _, k, _ = kernels.shape
    p = k // 2
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    Z, P = z.tolist(), kernels.tolist()
    out = np.zeros((bsz, m_out, ho, wo), dtype=np.result_type(z, kernels))
    for b in range(bsz):
        for n in range(m_out):
            for oh in range(ho):
                for ow in range(wo):
                    s = 0.0
                    for m in range(m_in):
                        for i in range(k):
                            hi = oh * stride + i - p
                            if hi < 0 or hi >= h:
                                continue
                            for j in range(k):
                                wi = ow * stride + j - p
                                if 0 <= wi < w:
                                    s += Z[b][m][hi][wi] * P[b][n][m][i][j]
                    out[b, n, oh, ow] = s
    return out


def pointwise_naive(x, weight, bias=None):
    weight = np.asarray(weight)
    return conv2d_naive(x, weight.reshape(weight.shape[0], -1, 1, 1), bias, 1, 0)


def gap_naive(x):
    x = np.asarray(x, dtype=np.float64)
    b, c, h, w = x.shape
    out = np.zeros((b, c, 1, 1))
    for i in range(b):
        for j in range(c):
            out[i, j, 0, 0] = math.fsum(x[i, j].ravel().tolist()) / (h * w)
    return out


def gsi_predict_naive(x, params, width, k):
    z = pointwise_naive(x, params["pw1.weight"], params["pw1.bias"])
    pooled = gap_naive(z)
    q = pointwise_naive(pooled, params["pw2.weight"], params["pw2.bias"])
    return q.reshape(x.shape[0], width, width, k, k)


def gsi_forward_naive(x, params, kernels, stride=1):
    """GSI output given the per-sample kernels, built from scalar loops only."""
    z = pointwise_naive(x, params["pw1.weight"], params["pw1.bias"])
    u = gsi_apply_naive(z, kernels, stride)
    return pointwise_naive(u, params["pw3.weight"], params["pw3.bias"])
