"""Dual complementary dynamic convolution.

Two branches with predicted kernels, summed:

* LSA (local spatial-adaptive): a small depthwise/pointwise stack predicts a
  ``k_lsa x k_lsa`` kernel for every output position.  The kernel is shared by
  the ``group_size`` consecutive channels of a group (involution style).
* GSI (global shift-invariant): a pointwise reduction C -> m, global average
  pooling and another pointwise layer predict one dense ``m x m x k x k``
  kernel per sample.  The kernel is applied at every position of the reduced
  feature and a final pointwise layer maps m -> C.

Parameters are plain ``dict[str, ndarray]``.  Every ``*_vjp`` returns the
input gradient together with a gradient dict keyed like the parameters.
Gradients w.r.t. the input include the contribution that flows through the
kernel-prediction sub-network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import basic_ops as B
from .static_ops import (depthwise_forward, depthwise_vjp, extract_taps, output_size,
                         pointwise_forward, pointwise_vjp, scatter_taps)
from .tensor import Rng, batched_matmul, global_avg_pool, global_avg_pool_vjp, pad_zero


@dataclass(frozen=True)
class LsaConfig:
    channels: int
    kernel_size: int = 7
    dw_kernel_size: int = 3   # 0 drops the depthwise layers (plain involution predictor)
    n_pairs: int = 2
    alpha: float = 0.25
    group_size: int = 16
    stride: int = 1
    final_bias: bool = False

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"k_lsa must be odd, got {self.kernel_size}")
        if self.dw_kernel_size < 0 or (self.dw_kernel_size and self.dw_kernel_size % 2 == 0):
            raise ValueError(f"k_lsa_dw must be odd (or 0), got {self.dw_kernel_size}")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.n_pairs < 1 or self.group_size < 1 or self.stride < 1:
            raise ValueError("n_pairs, group_size and stride must be >= 1")

    @property
    def groups(self) -> int:
        if self.channels % self.group_size == 0:
            return self.channels // self.group_size
        return 1

    @property
    def reduced(self) -> int:
        return math.ceil(self.alpha * self.channels)

    @property
    def trajectory(self) -> list[int]:
        """Channel widths through the predictor, C -> aC -> ... -> G*k^2."""
        return ([self.channels] + [self.reduced] * (self.n_pairs - 1)
                + [self.groups * self.kernel_size ** 2])

    @property
    def receptive_field(self) -> int:
        """Side of the input window each predicted kernel depends on (at stride 1)."""
        if not self.dw_kernel_size:
            return 1
        return self.n_pairs * (self.dw_kernel_size - 1) + 1


@dataclass(frozen=True)
class GsiConfig:
    channels: int
    kernel_size: int = 1
    lam: float = 1.0
    stride: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"k_gsi must be odd, got {self.kernel_size}")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")

    @property
    def width(self) -> int:
        """Reduced width m = round(lambda * sqrt(C)), at least 1 (halves round up)."""
        return max(1, int(math.floor(self.lam * math.sqrt(self.channels) + 0.5)))


def _kaiming(rng: Rng, shape, fan_in: int, dtype) -> np.ndarray:
    return rng.normal(shape, std=math.sqrt(2.0 / fan_in)).astype(dtype)


# --------------------------------------------------------------------------
# LSA branch
# --------------------------------------------------------------------------


def init_lsa_params(cfg: LsaConfig, rng: Rng, zero_final: bool = False, dtype=np.float64):
    """Predictor weights and BN buffers.  ``zero_final`` zeroes the last pointwise layer."""
    params, buffers = {}, {}
    ch, kd, n = cfg.trajectory, cfg.dw_kernel_size, cfg.n_pairs
    for i in range(n):
        if kd:
            params[f"dw{i}.weight"] = _kaiming(rng, (ch[i], 1, kd, kd), kd * kd, dtype)
        w = _kaiming(rng, (ch[i + 1], ch[i], 1, 1), ch[i], dtype)
        params[f"pw{i}.weight"] = np.zeros_like(w) if (zero_final and i == n - 1) else w
        if i < n - 1:
            params[f"bn{i}.weight"] = np.ones(ch[i + 1], dtype)
            params[f"bn{i}.bias"] = np.zeros(ch[i + 1], dtype)
            buffers[f"bn{i}.running_mean"] = np.zeros(ch[i + 1], dtype)
            buffers[f"bn{i}.running_var"] = np.ones(ch[i + 1], dtype)
    if cfg.final_bias:
        params[f"pw{n - 1}.bias"] = np.zeros(ch[-1], dtype)
    return params, buffers


def _lsa_predict_fwd(x, params, cfg: LsaConfig, buffers=None):
    if x.shape[1] != cfg.channels:
        raise ValueError(f"LSA expects {cfg.channels} channels, got {x.shape[1]}")
    steps = []
    z = B.avg_pool(x, cfg.stride)
    n = cfg.n_pairs
    for i in range(n):
        if cfg.dw_kernel_size:
            steps.append(("dw", i, z))
            z = depthwise_forward(z, params[f"dw{i}.weight"])
        steps.append(("pw", i, z))
        z = pointwise_forward(z, params[f"pw{i}.weight"], params.get(f"pw{i}.bias"))
        if i < n - 1:
            rm = rv = None
            if buffers is not None:
                rm, rv = buffers[f"bn{i}.running_mean"], buffers[f"bn{i}.running_var"]
            z, bn_cache = B.batchnorm_forward(z, params[f"bn{i}.weight"], params[f"bn{i}.bias"], rm, rv)
            steps.append(("bn", i, bn_cache))
            steps.append(("relu", i, z))
            z = B.relu_forward(z)
    b, _, h, w = z.shape
    kernels = z.reshape(b, cfg.groups, cfg.kernel_size ** 2, h, w)
    return kernels, {"x_shape": x.shape, "steps": steps}


def _lsa_predict_bwd(cache, dkernels, params, cfg: LsaConfig):
    grads = {}
    b, g, kk, h, w = dkernels.shape
    dz = dkernels.reshape(b, g * kk, h, w)
    for kind, i, saved in reversed(cache["steps"]):
        if kind == "relu":
            dz = B.relu_vjp(saved, dz)
        elif kind == "bn":
            dz, grads[f"bn{i}.weight"], grads[f"bn{i}.bias"] = B.batchnorm_vjp(saved, dz)
        elif kind == "pw":
            dz, grads[f"pw{i}.weight"], db = pointwise_vjp(
                saved, params[f"pw{i}.weight"], dz, params.get(f"pw{i}.bias"))
            if db is not None:
                grads[f"pw{i}.bias"] = db
        else:
            dz, grads[f"dw{i}.weight"], _ = depthwise_vjp(saved, params[f"dw{i}.weight"], dz)
    return B.avg_pool_vjp(dz, cfg.stride), grads


def lsa_predict(x, params, cfg: LsaConfig, buffers=None) -> np.ndarray:
    """Kernel field [B, G, k_lsa^2, H', W'].

    Predictor channel ``g * k^2 + (i * k + j)`` becomes tap (i, j) of group g.
    With ``buffers`` the predictor BN layers use running statistics.
    """
    return _lsa_predict_fwd(x, params, cfg, buffers)[0]


def lsa_forward(x, kernels, cfg: LsaConfig) -> np.ndarray:
    """Apply a per-position kernel field; channel count is preserved."""
    b, c, h, w = x.shape
    k, s, p = cfg.kernel_size, cfg.stride, cfg.kernel_size // 2
    ho, wo = output_size(h, k, s, p), output_size(w, k, s, p)
    g = kernels.shape[1]
    if c % g or kernels.shape != (b, g, k * k, ho, wo):
        raise ValueError(f"kernel field {kernels.shape} does not fit input {x.shape} "
                         f"(expected [{b}, G, {k * k}, {ho}, {wo}])")
    xp = pad_zero(x, p).reshape(b, g, c // g, h + 2 * p, w + 2 * p)
    out = np.zeros((b, g, c // g, ho, wo), dtype=np.result_type(x, kernels))
    for t in range(k * k):
        i, j = divmod(t, k)
        out += xp[..., i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] * kernels[:, :, None, t]
    return out.reshape(b, c, ho, wo)


def lsa_forward_vjp(x, kernels, cfg: LsaConfig, dy):
    """Gradients of :func:`lsa_forward` w.r.t. the input and the kernel field."""
    b, c, h, w = x.shape
    k, s, p = cfg.kernel_size, cfg.stride, cfg.kernel_size // 2
    g = kernels.shape[1]
    ho, wo = kernels.shape[-2:]
    if dy.shape != (b, c, ho, wo):
        raise ValueError(f"dy shape {dy.shape} != output shape {(b, c, ho, wo)}")
    xp = pad_zero(x, p).reshape(b, g, c // g, h + 2 * p, w + 2 * p)
    dyg = dy.reshape(b, g, c // g, ho, wo)
    dxp = np.zeros(xp.shape, dtype=np.result_type(dy, kernels))
    dk = np.zeros(kernels.shape, dtype=np.result_type(dy, x))
    for t in range(k * k):
        i, j = divmod(t, k)
        sl = (Ellipsis, slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
        dk[:, :, t] = (xp[sl] * dyg).sum(axis=2)
        dxp[sl] += dyg * kernels[:, :, None, t]
    dx = dxp.reshape(b, c, h + 2 * p, w + 2 * p)[:, :, p:p + h, p:p + w]
    return np.ascontiguousarray(dx), dk


def lsa_branch(x, params, cfg: LsaConfig, buffers=None) -> np.ndarray:
    return lsa_forward(x, lsa_predict(x, params, cfg, buffers), cfg)


def lsa_fwd(x, params, cfg: LsaConfig, buffers=None):
    """LSA branch forward that also returns the cache consumed by :func:`lsa_bwd`."""
    kernels, pred_cache = _lsa_predict_fwd(x, params, cfg, buffers)
    return lsa_forward(x, kernels, cfg), {"x": x, "kernels": kernels, "pred": pred_cache}


def lsa_bwd(cache, dy, params, cfg: LsaConfig):
    dx_direct, dk = lsa_forward_vjp(cache["x"], cache["kernels"], cfg, dy)
    dx_pred, grads = _lsa_predict_bwd(cache["pred"], dk, params, cfg)
    return dx_direct + dx_pred, grads


def lsa_vjp(x, params, cfg: LsaConfig, dy, buffers=None):
    """Full LSA branch VJP; dx sums the direct and the kernel-prediction paths."""
    return lsa_bwd(lsa_fwd(x, params, cfg, buffers)[1], dy, params, cfg)


# --------------------------------------------------------------------------
# GSI branch
# --------------------------------------------------------------------------


def init_gsi_params(cfg: GsiConfig, rng: Rng, zero_kernel: bool = False, dtype=np.float64):
    """pw1: C -> m, pw2: m -> m*m*k^2 (kernel entries), pw3: m -> C; all with bias."""
    c, m, kk = cfg.channels, cfg.width, cfg.kernel_size ** 2
    pw2 = _kaiming(rng, (m * m * kk, m, 1, 1), m, dtype)
    return {
        "pw1.weight": _kaiming(rng, (m, c, 1, 1), c, dtype),
        "pw1.bias": np.zeros(m, dtype),
        "pw2.weight": np.zeros_like(pw2) if zero_kernel else pw2,
        "pw2.bias": np.zeros(m * m * kk, dtype),
        "pw3.weight": _kaiming(rng, (c, m, 1, 1), m, dtype),
        "pw3.bias": np.zeros(c, dtype),
    }


def _gsi_predict_from_reduced(z, params, cfg: GsiConfig):
    b = z.shape[0]
    m, k = cfg.width, cfg.kernel_size
    pooled = global_avg_pool(z)
    q = pointwise_forward(pooled, params["pw2.weight"], params["pw2.bias"])
    return q.reshape(b, m, m, k, k), pooled


def _check_gsi_input(x, cfg: GsiConfig):
    if x.ndim != 4 or x.shape[1] != cfg.channels:
        raise ValueError(f"GSI expects {cfg.channels} channels, got shape {x.shape}")


def gsi_predict(x, params, cfg: GsiConfig) -> np.ndarray:
    """Per-sample kernel [B, m, m, k_gsi, k_gsi]; no spatial axis by construction."""
    _check_gsi_input(x, cfg)
    z = pointwise_forward(x, params["pw1.weight"], params["pw1.bias"])
    return _gsi_predict_from_reduced(z, params, cfg)[0]


def gsi_apply(z, kernels, stride: int = 1) -> np.ndarray:
    """Convolve each sample of ``z`` [B, m, H, W] with its own dense kernel."""
    b, m_in, h, w = z.shape
    _, m_out, m_in2, k, _ = kernels.shape
    if m_in2 != m_in or kernels.shape[0] != b:
        raise ValueError(f"kernel {kernels.shape} does not fit reduced feature {z.shape}")
    cols = extract_taps(z, k, stride, k // 2)
    ho, wo = cols.shape[-2:]
    a = cols.reshape(b, m_in * k * k, ho * wo).transpose(0, 2, 1)
    pm = kernels.reshape(b, m_out, m_in * k * k).transpose(0, 2, 1)
    out = batched_matmul(a, pm)
    return np.ascontiguousarray(out.transpose(0, 2, 1).reshape(b, m_out, ho, wo))


def gsi_apply_vjp(z, kernels, dy, stride: int = 1):
    b, m_in, h, w = z.shape
    _, m_out, _, k, _ = kernels.shape
    cols = extract_taps(z, k, stride, k // 2)
    ho, wo = cols.shape[-2:]
    a = cols.reshape(b, m_in * k * k, ho * wo)                       # [B, K, M]
    dyb = dy.reshape(b, m_out, ho * wo).transpose(0, 2, 1)           # [B, M, m_out]
    dp = batched_matmul(a, dyb).transpose(0, 2, 1).reshape(kernels.shape)
    dcols = batched_matmul(dyb, kernels.reshape(b, m_out, m_in * k * k))
    dcols = dcols.transpose(0, 2, 1).reshape(b, m_in, k * k, ho, wo)
    return scatter_taps(dcols, z.shape, k, stride, k // 2), dp


def gsi_fwd(x, params, cfg: GsiConfig):
    """GSI branch forward plus the cache consumed by :func:`gsi_bwd`."""
    _check_gsi_input(x, cfg)
    z = pointwise_forward(x, params["pw1.weight"], params["pw1.bias"])
    kernels, pooled = _gsi_predict_from_reduced(z, params, cfg)
    u = gsi_apply(z, kernels, cfg.stride)
    y = pointwise_forward(u, params["pw3.weight"], params["pw3.bias"])
    return y, {"x": x, "z": z, "kernels": kernels, "pooled": pooled, "u": u}


def gsi_bwd(cache, dy, params, cfg: GsiConfig):
    x, z, kernels, pooled, u = (cache[k] for k in ("x", "z", "kernels", "pooled", "u"))
    grads = {}
    du, grads["pw3.weight"], grads["pw3.bias"] = pointwise_vjp(u, params["pw3.weight"], dy, params["pw3.bias"])
    dz, dk = gsi_apply_vjp(z, kernels, du, cfg.stride)
    dq = dk.reshape(pooled.shape[0], -1, 1, 1)
    dpooled, grads["pw2.weight"], grads["pw2.bias"] = pointwise_vjp(
        pooled, params["pw2.weight"], dq, params["pw2.bias"])
    dz = dz + global_avg_pool_vjp(z.shape, dpooled)
    dx, grads["pw1.weight"], grads["pw1.bias"] = pointwise_vjp(x, params["pw1.weight"], dz, params["pw1.bias"])
    return dx, grads


def gsi_forward(x, params, cfg: GsiConfig) -> np.ndarray:
    return gsi_fwd(x, params, cfg)[0]


def gsi_vjp(x, params, cfg: GsiConfig, dy):
    """GSI VJP through both the applied kernel and the kernel prediction."""
    return gsi_bwd(gsi_fwd(x, params, cfg)[1], dy, params, cfg)


# --------------------------------------------------------------------------
# DCDC = LSA + GSI
# --------------------------------------------------------------------------


def _check_branch_cfgs(lsa_cfg: LsaConfig, gsi_cfg: GsiConfig):
    if lsa_cfg.stride != gsi_cfg.stride or lsa_cfg.channels != gsi_cfg.channels:
        raise ValueError("LSA and GSI branches must share channels and stride")


def dcdc_forward(x, theta, gamma, lsa_cfg: LsaConfig, gsi_cfg: GsiConfig, lsa_buffers=None):
    _check_branch_cfgs(lsa_cfg, gsi_cfg)
    y_lsa = lsa_branch(x, theta, lsa_cfg, lsa_buffers)
    y_gsi = gsi_forward(x, gamma, gsi_cfg)
    if y_lsa.shape != y_gsi.shape:
        raise ValueError(f"branch outputs differ: {y_lsa.shape} vs {y_gsi.shape}")
    return y_lsa + y_gsi


def dcdc_vjp(x, theta, gamma, lsa_cfg: LsaConfig, gsi_cfg: GsiConfig, dy, lsa_buffers=None):
    """Returns (dx, dtheta, dgamma) with dx = dx_lsa + dx_gsi."""
    _check_branch_cfgs(lsa_cfg, gsi_cfg)
    dx_lsa, dtheta = lsa_vjp(x, theta, lsa_cfg, dy, lsa_buffers)
    dx_gsi, dgamma = gsi_vjp(x, gamma, gsi_cfg, dy)
    return dx_lsa + dx_gsi, dtheta, dgamma
