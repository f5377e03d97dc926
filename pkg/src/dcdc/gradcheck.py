"""Finite-difference and adjoint checks for every VJP.

Each case is a pair of closures over a dict of named float64 arrays:
``fwd(arrays) -> y`` and ``vjp(arrays, dy) -> {name: grad}``.  The scalar
probed by finite differences is ``<y, dy>`` for a fixed random ``dy``.

The adjoint test compares ``<dy, J v>`` with ``<J^T dy, v>``.  ``J v`` is taken
by complex-step differentiation, which has no subtraction error, so the two
sides agree to rounding level.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as A
from . import basic_ops as B
from . import dynamic_ops as D
from . import static_ops as S
from .tensor import Rng, global_avg_pool, global_avg_pool_vjp

FD_EPS = 1e-5
FD_TOL = 1e-6
ADJOINT_TOL = 1e-10
_CSTEP = 1e-20
FLOOR_FRACTION = 1e-3


@dataclass
class Case:
    name: str
    arrays: dict[str, np.ndarray]
    fwd: Callable
    vjp: Callable
    max_checks: int | None = None   # coordinates probed per tensor; None means all


@dataclass
class CheckResult:
    op: str
    fd_error: float
    adjoint_error: float
    worst_tensor: str
    tol: float
    adjoint_tol: float

    @property
    def passed(self) -> bool:
        return self.fd_error <= self.tol and self.adjoint_error <= self.adjoint_tol


def rel_error(a: np.ndarray, n: np.ndarray, floor: float = 0.0) -> float:
    """max|a - n| / max(max|a|, max|n|, floor); 0 when the denominator is 0."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def numeric_grad(fwd, arrays, name, dy, eps=FD_EPS, coords=None):
    """Central differences of <fwd(arrays), dy> w.r.t. ``arrays[name]`` at ``coords``."""
    base = arrays[name]
    flat_coords = range(base.size) if coords is None else coords
    out = np.zeros(len(flat_coords))
    for n, i in enumerate(flat_coords):
        vals = []
        for sign in (1.0, -1.0):
            pert = base.copy()
            pert.flat[i] += sign * eps
            vals.append(float(np.sum(fwd({**arrays, name: pert}) * dy)))
        out[n] = (vals[0] - vals[1]) / (2 * eps)
    return out


def fd_check(case: Case, rng: Rng, eps=FD_EPS):
    """Worst per-tensor relative error and the tensor it occurs in."""
    y = case.fwd(case.arrays)
    dy = rng.normal(y.shape)
    grads = case.vjp(case.arrays, dy)
    pairs = {}
    for name, arr in case.arrays.items():
        coords = None
        if case.max_checks is not None and arr.size > case.max_checks:
            coords = sorted(int(i) for i in rng.permutation(arr.size)[:case.max_checks])
        num = numeric_grad(case.fwd, case.arrays, name, dy, eps, coords)
        ana = np.asarray(grads[name]).reshape(-1)
        pairs[name] = (ana if coords is None else ana[coords], num)
    # tensors whose true gradient vanishes (a bias feeding batch norm) are
    # measured against a small fraction of the largest gradient in the case
    floor = FLOOR_FRACTION * max(np.abs(a).max(initial=0.0) for a, _ in pairs.values())
    worst, where = 0.0, ""
    for name, (ana, num) in pairs.items():
        err = rel_error(ana, num, floor)
        if err >= worst:
            worst, where = err, name
    return worst, where


def adjoint_check(case: Case, rng: Rng) -> float:
    y = case.fwd(case.arrays)
    dy = rng.normal(y.shape)
    v = {k: rng.normal(a.shape) for k, a in case.arrays.items()}
    yc = case.fwd({k: a + 1j * _CSTEP * v[k] for k, a in case.arrays.items()})
    jv = yc.imag / _CSTEP
    grads = case.vjp(case.arrays, dy)
    lhs = float(np.sum(dy * jv))
    rhs = float(sum(np.sum(grads[k] * v[k]) for k in case.arrays))
    scale = max(abs(lhs), abs(rhs))
    return 0.0 if scale == 0.0 else abs(lhs - rhs) / scale


def check(case: Case, seed: int = 0, tol=FD_TOL, adjoint_tol=ADJOINT_TOL) -> CheckResult:
    fd, where = fd_check(case, Rng(seed))
    adj = adjoint_check(case, Rng(seed + 1))
    return CheckResult(case.name, fd, adj, where, tol, adjoint_tol)


# --------------------------------------------------------------------------
# cases
# --------------------------------------------------------------------------


def _conv_case(rng, name, c_in, c_out, k, stride, groups, bias):
    arrays = {"x": rng.normal((2, c_in, 6, 5)),
              "weight": rng.normal((c_out, c_in // groups, k, k), std=0.5)}
    if bias:
        arrays["bias"] = rng.normal((c_out,))

    def cw(a):
        return S.ConvWeights(a["weight"], a.get("bias"), stride, None, groups)

    def fwd(a):
        return S.conv2d_forward(a["x"], cw(a))

    def vjp(a, dy):
        dx, dw, db = S.conv2d_vjp(a["x"], cw(a), dy)
        out = {"x": dx, "weight": dw}
        if bias:
            out["bias"] = db
        return out

    return Case(name, arrays, fwd, vjp)


def _lsa_apply_case(rng):
    cfg = D.LsaConfig(4, kernel_size=3, group_size=2, stride=2)
    arrays = {"x": rng.normal((2, 4, 6, 6)), "kernels": rng.normal((2, 2, 9, 3, 3))}

    def vjp(a, dy):
        dx, dk = D.lsa_forward_vjp(a["x"], a["kernels"], cfg, dy)
        return {"x": dx, "kernels": dk}

    return Case("lsa_apply", arrays, lambda a: D.lsa_forward(a["x"], a["kernels"], cfg), vjp)


def _split(a, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in a.items() if k.startswith(prefix)}


def _lsa_case(rng, name="lsa", stride=1, dw=3, final_bias=False):
    cfg = D.LsaConfig(4, kernel_size=3, dw_kernel_size=dw, n_pairs=2, alpha=0.5, group_size=2,
                      stride=stride, final_bias=final_bias)
    theta, _ = D.init_lsa_params(cfg, rng, zero_final=False)
    arrays = {"x": rng.normal((2, 4, 4, 4)), **{f"theta.{k}": v for k, v in theta.items()}}
    for k in arrays:
        if k.endswith("bias") and k.startswith("theta.bn"):
            arrays[k] = rng.normal(arrays[k].shape, std=0.5)

    def fwd(a):
        return D.lsa_branch(a["x"], _split(a, "theta."), cfg)

    def vjp(a, dy):
        dx, g = D.lsa_vjp(a["x"], _split(a, "theta."), cfg, dy)
        return {"x": dx, **{f"theta.{k}": v for k, v in g.items()}}

    return Case(name, arrays, fwd, vjp)


def _gsi_case(rng, name="gsi", k=3, stride=2):
    cfg = D.GsiConfig(4, kernel_size=k, lam=1.0, stride=stride)
    gamma = D.init_gsi_params(cfg, rng, zero_kernel=False)
    arrays = {"x": rng.normal((2, 4, 4, 4)),
              **{f"gamma.{n}": v + rng.normal(v.shape, std=0.1) for n, v in gamma.items()}}

    def fwd(a):
        return D.gsi_forward(a["x"], _split(a, "gamma."), cfg)

    def vjp(a, dy):
        dx, g = D.gsi_vjp(a["x"], _split(a, "gamma."), cfg, dy)
        return {"x": dx, **{f"gamma.{n}": v for n, v in g.items()}}

    return Case(name, arrays, fwd, vjp)


def _dcdc_case(rng):
    lcfg = D.LsaConfig(4, kernel_size=3, dw_kernel_size=3, n_pairs=2, alpha=0.5, group_size=2)
    gcfg = D.GsiConfig(4, kernel_size=3)
    theta, _ = D.init_lsa_params(lcfg, rng, zero_final=False)
    gamma = D.init_gsi_params(gcfg, rng, zero_kernel=False)
    arrays = {"x": rng.normal((2, 4, 4, 4)),
              **{f"theta.{k}": v for k, v in theta.items()},
              **{f"gamma.{k}": v + rng.normal(v.shape, std=0.1) for k, v in gamma.items()}}

    def fwd(a):
        return D.dcdc_forward(a["x"], _split(a, "theta."), _split(a, "gamma."), lcfg, gcfg)

    def vjp(a, dy):
        dx, dt, dg = D.dcdc_vjp(a["x"], _split(a, "theta."), _split(a, "gamma."), lcfg, gcfg, dy)
        return {"x": dx, **{f"theta.{k}": v for k, v in dt.items()},
                **{f"gamma.{k}": v for k, v in dg.items()}}

    return Case("dcdc", arrays, fwd, vjp)


def _bn_case(rng, training=True):
    arrays = {"x": rng.normal((3, 3, 3, 2)) * 2 + 1, "weight": rng.normal((3,)), "bias": rng.normal((3,))}
    rm, rv = rng.normal((3,)), rng.uniform((3,), 0.5, 2.0)

    def fwd(a):
        if training:
            return B.batchnorm_forward(a["x"], a["weight"], a["bias"])[0]
        return B.batchnorm_forward(a["x"], a["weight"], a["bias"], rm, rv)[0]

    def vjp(a, dy):
        cache = (B.batchnorm_forward(a["x"], a["weight"], a["bias"]) if training
                 else B.batchnorm_forward(a["x"], a["weight"], a["bias"], rm, rv))[1]
        dx, dw, db = B.batchnorm_vjp(cache, dy)
        return {"x": dx, "weight": dw, "bias": db}

    return Case("batchnorm" if training else "batchnorm_eval", arrays, fwd, vjp)


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x) * gap + x, x)


def _simple_cases(rng):
    cases = []
    x = _away_from_zero(rng, (2, 3, 4, 4))
    cases.append(Case("relu", {"x": x}, lambda a: B.relu_forward(a["x"]),
                      lambda a, dy: {"x": B.relu_vjp(a["x"], dy)}))

    # distinct values spaced well beyond the FD step keep the argmax stable
    xm = (rng.permutation(2 * 3 * 5 * 5).astype(np.float64) * 0.01).reshape(2, 3, 5, 5)

    def mp_vjp(a, dy):
        _, idx = B.maxpool_forward(a["x"])
        return {"x": B.maxpool_vjp(a["x"].shape, idx, dy)}

    cases.append(Case("maxpool", {"x": xm}, lambda a: B.maxpool_forward(a["x"])[0], mp_vjp))
    cases.append(Case("gap", {"x": rng.normal((2, 3, 4, 5))}, lambda a: global_avg_pool(a["x"]),
                      lambda a, dy: {"x": global_avg_pool_vjp(a["x"].shape, dy)}))
    cases.append(Case("avgpool", {"x": rng.normal((2, 3, 4, 6))}, lambda a: B.avg_pool(a["x"], 2),
                      lambda a, dy: {"x": B.avg_pool_vjp(dy, 2)}))

    def lin_vjp(a, dy):
        dx, dw, db = B.linear_vjp(a["x"], a["weight"], dy)
        return {"x": dx, "weight": dw, "bias": db}

    cases.append(Case("linear", {"x": rng.normal((3, 5)), "weight": rng.normal((4, 5)), "bias": rng.normal((4,))},
                      lambda a: B.linear_forward(a["x"], a["weight"], a["bias"]), lin_vjp))
    cases.append(Case("add", {"a": rng.normal((2, 3, 3, 3)), "b": rng.normal((2, 3, 3, 3))},
                      lambda a: a["a"] + a["b"], lambda a, dy: {"a": dy, "b": dy}))
    return cases


def _graph_case(rng, max_checks=6):
    """Three DCDC bottleneck blocks through the tape (sampled coordinates per tensor)."""
    from .network import build_model, small_spec

    spec = small_spec("dcdc", base_width=8, blocks=(1, 1, 1), num_classes=3, in_channels=2,
                      k_lsa=3, k_gsi=3, stem_stride=1)
    graph = build_model(spec, rng.spawn(7), zero_init_kernels=False)
    params = graph.named_parameters()
    arrays = {"x": rng.normal((2, 2, 8, 8)),
              **{k: v + rng.normal(v.shape, std=0.05) for k, v in params.items()}}

    def load(a):
        for k in params:
            graph.set_parameter(k, a[k])

    def fwd(a):
        load(a)
        return A.forward(graph, a["x"], training=True, update_stats=False)[0]

    def vjp(a, dy):
        load(a)
        _, tape = A.forward(graph, a["x"], training=True, update_stats=False)
        grads, dx = A.backward(tape, dy)
        return {"x": dx, **grads}

    return Case("graph", arrays, fwd, vjp, max_checks=max_checks)


def build_cases(seed: int = 0) -> list[Case]:
    rng = Rng(seed)
    return [
        _conv_case(rng, "conv", 4, 6, 3, 2, 2, True),
        _conv_case(rng, "depthwise", 4, 4, 3, 1, 4, False),
        _conv_case(rng, "pointwise", 4, 3, 1, 1, 1, True),
        _lsa_apply_case(rng),
        _lsa_case(rng),
        _lsa_case(rng, "lsa_stride2", stride=2),
        _lsa_case(rng, "involution", dw=0, final_bias=True),
        _gsi_case(rng),
        _dcdc_case(rng),
        _bn_case(rng),
        _bn_case(rng, training=False),
        *_simple_cases(rng),
        _graph_case(rng),
    ]


OP_NAMES = ("conv", "depthwise", "pointwise", "lsa_apply", "lsa", "lsa_stride2", "involution", "gsi",
            "dcdc", "batchnorm", "batchnorm_eval", "relu", "maxpool", "gap", "avgpool", "linear",
            "add", "graph")


def run(ops=None, tol=FD_TOL, adjoint_tol=ADJOINT_TOL, seed: int = 0) -> list[CheckResult]:
    """Check every case (or those named in ``ops``)."""
    if ops:
        unknown = set(ops) - set(OP_NAMES)
        if unknown:
            raise ValueError(f"unknown op(s) {sorted(unknown)}; choose from {OP_NAMES}")
    return [check(c, seed, tol, adjoint_tol) for c in build_cases(seed) if not ops or c.name in ops]
