"""Headless checks shared by ``dcdc selftest``: oracle equivalence on random
shapes and the defining invariants of the two branches."""
from __future__ import annotations

import numpy as np

from . import dynamic_ops as D
from . import oracles as O
from .static_ops import ConvWeights, conv2d_forward
from .tensor import Rng


def _odd(rng: Rng, hi: int) -> int:
    return 1 + 2 * int(rng.integers(hi // 2 + 1))


def random_conv(rng: Rng):
    """(x, weights) with B<=3, C<=8, H, W<=9, odd k, grouped and strided cases."""
    b = 1 + int(rng.integers(3))
    groups = (1, 1, 2, 4)[int(rng.integers(4))]
    c_in = groups * (1 + int(rng.integers(8 // groups)))
    c_out = groups * (1 + int(rng.integers(8 // groups)))
    k = _odd(rng, 5)
    h, w = 1 + int(rng.integers(9)), 1 + int(rng.integers(9))
    p = k // 2
    stride = 1 + int(rng.integers(2))
    if k > min(h, w) + 2 * p:
        k, p = 1, 0
    weight = rng.normal((c_out, c_in // groups, k, k))
    bias = rng.normal((c_out,)) if rng.uniform() < 0.5 else None
    return rng.normal((b, c_in, h, w)), ConvWeights(weight, bias, stride, p, groups)


def random_lsa(rng: Rng):
    """(x, kernel field, cfg) for the LSA apply step."""
    b = 1 + int(rng.integers(3))
    gs = 1 + int(rng.integers(4))
    g = 1 + int(rng.integers(8 // gs))
    c = g * gs
    k = _odd(rng, 5)
    stride = 1 + int(rng.integers(2))
    h = stride * (1 + int(rng.integers(9 // stride)))
    w = stride * (1 + int(rng.integers(9 // stride)))
    cfg = D.LsaConfig(c, kernel_size=k, group_size=gs, stride=stride)
    ho, wo = (h + 2 * (k // 2) - k) // stride + 1, (w + 2 * (k // 2) - k) // stride + 1
    return rng.normal((b, c, h, w)), rng.normal((b, g, k * k, ho, wo)), cfg


def random_gsi(rng: Rng):
    """(x, params, cfg) with predicted kernels from a random predictor."""
    b = 1 + int(rng.integers(3))
    c = 1 + int(rng.integers(8))
    k = _odd(rng, 3)
    stride = 1 + int(rng.integers(2))
    h, w = 1 + int(rng.integers(9)), 1 + int(rng.integers(9))
    cfg = D.GsiConfig(c, kernel_size=k, lam=(0.5, 1.0, 1.5)[int(rng.integers(3))], stride=stride)
    params = D.init_gsi_params(cfg, rng)
    params = {n: v + rng.normal(v.shape, std=0.1) for n, v in params.items()}
    return rng.normal((b, c, h, w)), params, cfg


def oracle_equivalence(n: int = 200, seed: int = 0) -> dict[str, tuple[int, float]]:
    """Per op: (number of shapes whose output differs bitwise, max |difference|)."""
    rng = Rng(seed)
    out = {}
    stats = [0, 0.0]
    for _ in range(n):
        x, w = random_conv(rng)
        ref = O.conv2d_naive(x, w.weight, w.bias, w.stride, w.padding, w.groups)
        _tally(stats, conv2d_forward(x, w), ref)
    out["conv2d"] = tuple(stats)
    stats = [0, 0.0]
    for _ in range(n):
        x, kern, cfg = random_lsa(rng)
        _tally(stats, D.lsa_forward(x, kern, cfg), O.lsa_apply_naive(x, kern, cfg.kernel_size, cfg.stride))
    out["lsa"] = tuple(stats)
    stats = [0, 0.0]
    for _ in range(n):
        x, params, cfg = random_gsi(rng)
        kern = D.gsi_predict(x, params, cfg)
        _tally(stats, D.gsi_forward(x, params, cfg), O.gsi_forward_naive(x, params, kern, cfg.stride))
    out["gsi"] = tuple(stats)
    return out


def _tally(stats, fast, ref):
    if fast.shape != ref.shape or not np.array_equal(fast, ref):
        stats[0] += 1
        if fast.shape == ref.shape:
            stats[1] = max(stats[1], float(np.abs(fast - ref).max()))
        else:
            stats[1] = float("inf")


# --------------------------------------------------------------------------
# invariants
# --------------------------------------------------------------------------


def gsi_permutation_error(seed: int = 0) -> float:
    """Relative change of the GSI kernel when spatial positions are shuffled."""
    rng = Rng(seed)
    cfg = D.GsiConfig(6, kernel_size=3)
    params = D.init_gsi_params(cfg, rng)
    params["pw2.bias"] = rng.normal(params["pw2.bias"].shape)
    x = rng.normal((2, 6, 7, 5))
    perm = rng.permutation(35)
    xp = x.reshape(2, 6, 35)[:, :, perm].reshape(2, 6, 7, 5)
    a, b = D.gsi_predict(x, params, cfg), D.gsi_predict(xp, params, cfg)
    return float(np.abs(a - b).max() / np.abs(a).max())


def lsa_locality_violations(seed: int = 0, positions: int = 12) -> int:
    """Positions whose kernel changes when the input outside the predictor's
    receptive field is perturbed (eval-mode BN, stride 1)."""
    rng = Rng(seed)
    cfg = D.LsaConfig(8, kernel_size=5, dw_kernel_size=3, n_pairs=2, group_size=4)
    params, buffers = D.init_lsa_params(cfg, rng)
    buffers = {k: (rng.uniform(v.shape, 0.5, 2.0) if "var" in k else rng.normal(v.shape))
               for k, v in buffers.items()}
    h = w = 13
    x = rng.normal((1, 8, h, w))
    base = D.lsa_predict(x, params, cfg, buffers)
    r = cfg.receptive_field // 2
    bad = 0
    for _ in range(positions):
        ph, pw = int(rng.integers(h)), int(rng.integers(w))
        yy, xx = np.mgrid[0:h, 0:w]
        outside = (np.abs(yy - ph) > r) | (np.abs(xx - pw) > r)
        xq = x + outside[None, None] * rng.normal(x.shape) * 10.0
        other = D.lsa_predict(xq, params, cfg, buffers)
        bad += not np.array_equal(base[..., ph, pw], other[..., ph, pw])
    return bad


def lsa_dirac_identity(seed: int = 0) -> bool:
    rng = Rng(seed)
    cfg = D.LsaConfig(6, kernel_size=5, group_size=2)
    x = rng.normal((2, 6, 7, 6))
    kern = np.zeros((2, 3, 25, 7, 6))
    kern[:, :, 12] = 1.0
    return bool(np.array_equal(D.lsa_forward(x, kern, cfg), x))


def dcdc_sum_exact(seed: int = 0) -> bool:
    rng = Rng(seed)
    lcfg = D.LsaConfig(8, kernel_size=3, group_size=4)
    gcfg = D.GsiConfig(8, kernel_size=3)
    theta, _ = D.init_lsa_params(lcfg, rng)
    gamma = D.init_gsi_params(gcfg, rng)
    x = rng.normal((2, 8, 6, 6))
    y = D.dcdc_forward(x, theta, gamma, lcfg, gcfg)
    return bool(np.array_equal(y, D.lsa_branch(x, theta, lcfg) + D.gsi_forward(x, gamma, gcfg)))
