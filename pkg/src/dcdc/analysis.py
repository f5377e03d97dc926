"""Parameter/FLOP accounting and kernel dumps.

FLOPs are multiply-accumulates (one MAC = one FLOP).  Batch norm, ReLU,
residual adds, max-pooling and the LSA stride pooling are not counted;
global average pooling counts one add per input element.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as A
from .dynamic_ops import GsiConfig, LsaConfig
from .tensor import write_tensor


@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    flops: int


@dataclass
class CostReport:
    rows: list[LayerCost] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def by_name(self) -> dict[str, LayerCost]:
        return {r.name: r for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "type", "params", "flops"])
        for r in self.rows:
            w.writerow([r.name, r.kind, r.params, r.flops])
        return buf.getvalue()


def _lsa_macs(cfg: LsaConfig, in_shape, out_shape) -> int:
    _, c, h, w = in_shape
    hp, wp = h // cfg.stride, w // cfg.stride
    ch = cfg.trajectory
    macs = 0
    for i in range(cfg.n_pairs):
        if cfg.dw_kernel_size:
            macs += ch[i] * cfg.dw_kernel_size ** 2 * hp * wp
        macs += ch[i] * ch[i + 1] * hp * wp
    return macs + c * cfg.kernel_size ** 2 * out_shape[2] * out_shape[3]


def _gsi_macs(cfg: GsiConfig, in_shape, out_shape) -> int:
    _, c, h, w = in_shape
    m, kk = cfg.width, cfg.kernel_size ** 2
    ho, wo = out_shape[2], out_shape[3]
    return (c * m * h * w          # pw1
            + m * h * w            # GAP adds
            + m * m * m * kk       # pw2 on the pooled vector
            + m * m * kk * ho * wo  # applied kernel
            + m * c * ho * wo)     # pw3


def layer_macs(layer: A.Layer, in_shapes, out_shape) -> int:
    """MACs for one sample."""
    if isinstance(layer, A.Conv2d):
        c_out, cg, k, _ = layer.params["weight"].shape
        return c_out * cg * k * k * out_shape[2] * out_shape[3]
    if isinstance(layer, A.Lsa):
        return _lsa_macs(layer.cfg, in_shapes[0], out_shape)
    if isinstance(layer, A.Gsi):
        return _gsi_macs(layer.cfg, in_shapes[0], out_shape)
    if isinstance(layer, A.Dcdc):
        return (_lsa_macs(layer.lsa_cfg, in_shapes[0], out_shape)
                + _gsi_macs(layer.gsi_cfg, in_shapes[0], out_shape))
    if isinstance(layer, A.Linear):
        return int(layer.params["weight"].size)
    if isinstance(layer, A.GlobalPool):
        _, c, h, w = in_shapes[0]
        return c * h * w
    return 0


def count_params(graph: A.LayerGraph) -> CostReport:
    """Exact trainable-parameter enumeration (BN affine and predictors included)."""
    return CostReport([LayerCost(n.name, n.layer.kind, sum(int(v.size) for v in n.layer.params.values()), 0)
                       for n in graph.nodes])


def count_flops(graph: A.LayerGraph, input_shape) -> CostReport:
    """Per-layer params and MACs at ``input_shape`` ([C, H, W] or [B, C, H, W])."""
    shape = tuple(input_shape)
    if len(shape) == 3:
        shape = (1,) + shape
    batch = shape[0]
    shapes = graph.shapes((1,) + shape[1:])
    rows = []
    for n in graph.nodes:
        ins = [shapes[i] for i in n.inputs]
        rows.append(LayerCost(n.name, n.layer.kind, sum(int(v.size) for v in n.layer.params.values()),
                              batch * layer_macs(n.layer, ins, shapes[n.name])))
    return CostReport(rows)


# --------------------------------------------------------------------------
# kernel dumps
# --------------------------------------------------------------------------


def write_pgm(path, img: np.ndarray) -> None:
    """Binary 8-bit PGM, min-max normalized to [0, 255] (constant images map to 0)."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros(img.shape) if hi == lo else (img - lo) / (hi - lo) * 255.0
    data = np.round(scaled).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    parts = buf.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def dynamic_kernels(graph: A.LayerGraph, x, layer_id: str, training: bool = False) -> dict[str, np.ndarray]:
    """Predicted kernels of node ``layer_id`` for input ``x``: keys ``lsa`` and/or ``gsi``."""
    layer = graph[layer_id]
    if not isinstance(layer, (A.Lsa, A.Gsi, A.Dcdc)):
        raise ValueError(f"layer {layer_id!r} ({layer.kind}) has no dynamic kernels")
    _, tape = A.forward(graph, x, training=training, update_stats=False)
    cache = next(c for node, c in tape.entries if node.name == layer_id)
    if isinstance(layer, A.Lsa):
        return {"lsa": cache["kernels"]}
    if isinstance(layer, A.Gsi):
        return {"gsi": cache["kernels"]}
    return {"lsa": cache[0]["kernels"], "gsi": cache[1]["kernels"]}


def dump_kernels(graph: A.LayerGraph, x, layer_id: str, out_dir) -> list[str]:
    """Write predicted kernels of one layer under ``out_dir``.

    LSA: ``lsa_kernels.dcdc`` (whole field [B, G, k*k, H', W']) plus one k x k
    PGM per (sample, group, position) in ``lsa/b{b}_g{g}/``.
    GSI: ``gsi/b{b}.dcdc`` ([m, m, k, k]) and ``gsi/b{b}.pgm`` per sample.
    """
    kernels = dynamic_kernels(graph, x, layer_id)
    written = []
    os.makedirs(out_dir, exist_ok=True)
    if "lsa" in kernels:
        field_ = kernels["lsa"]
        b, g, kk, ho, wo = field_.shape
        k = int(round(kk ** 0.5))
        path = os.path.join(out_dir, "lsa_kernels.dcdc")
        write_tensor(path, field_)
        written.append(path)
        for bi in range(b):
            for gi in range(g):
                d = os.path.join(out_dir, "lsa", f"b{bi}_g{gi}")
                os.makedirs(d, exist_ok=True)
                for h in range(ho):
                    for w in range(wo):
                        p = os.path.join(d, f"h{h:03d}_w{w:03d}.pgm")
                        write_pgm(p, field_[bi, gi, :, h, w].reshape(k, k))
                        written.append(p)
    if "gsi" in kernels:
        p_all = kernels["gsi"]
        b, m, _, k, _ = p_all.shape
        d = os.path.join(out_dir, "gsi")
        os.makedirs(d, exist_ok=True)
        for bi in range(b):
            path = os.path.join(d, f"b{bi}.dcdc")
            write_tensor(path, p_all[bi])
            # rows: (output channel, kernel row); cols: (input channel, kernel col)
            img = p_all[bi].transpose(0, 2, 1, 3).reshape(m * k, m * k)
            write_pgm(os.path.join(d, f"b{bi}.pgm"), img)
            written += [path, os.path.join(d, f"b{bi}.pgm")]
    return written
