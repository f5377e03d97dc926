"""Layers with forward + VJP, a layer graph and a single-use reverse-mode tape."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import basic_ops as B
from . import dynamic_ops as D
from .static_ops import ConvWeights, conv2d_forward, conv2d_vjp, output_size
from .tensor import (decode_tensor, encode_tensor, global_avg_pool, global_avg_pool_vjp)


class Layer:
    """Base class.  ``forward`` returns ``(y, cache)``; ``backward`` consumes the cache."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.no_decay: set[str] = set()

    def forward(self, inputs, training=True, update_stats=True):
        raise NotImplementedError

    def backward(self, cache, dy):
        """Returns (list of input gradients, dict of parameter gradients)."""
        raise NotImplementedError

    def output_shape(self, in_shapes):
        return in_shapes[0]

    def __repr__(self):
        return f"{type(self).__name__}({self.kind})"


class Conv2d(Layer):
    def __init__(self, weight, bias=None, stride=1, padding=None, groups=1):
        super().__init__()
        self.params["weight"] = weight
        if bias is not None:
            self.params["bias"] = bias
        self.stride, self.groups = stride, groups
        self.padding = weight.shape[2] // 2 if padding is None else padding
        c_out, cg, k, _ = weight.shape
        if k == 1 and groups == 1:
            self.kind = "pointwise"
        elif groups > 1 and cg == 1 and groups == c_out:
            self.kind = "depthwise"
        else:
            self.kind = "conv"

    def _weights(self):
        return ConvWeights(self.params["weight"], self.params.get("bias"), self.stride, self.padding, self.groups)

    def forward(self, inputs, training=True, update_stats=True):
        x = inputs[0]
        return conv2d_forward(x, self._weights()), x

    def backward(self, x, dy):
        dx, dw, db = conv2d_vjp(x, self._weights(), dy)
        grads = {"weight": dw}
        if db is not None:
            grads["bias"] = db
        return [dx], grads

    def output_shape(self, in_shapes):
        b, c, h, w = in_shapes[0]
        k = self.params["weight"].shape[2]
        if c != self.params["weight"].shape[1] * self.groups:
            raise ValueError(f"conv expects {self.params['weight'].shape[1] * self.groups} channels, got {c}")
        return (b, self.params["weight"].shape[0],
                output_size(h, k, self.stride, self.padding), output_size(w, k, self.stride, self.padding))


class BatchNorm2d(Layer):
    kind = "batchnorm"

    def __init__(self, channels, dtype=np.float64):
        super().__init__()
        self.params = {"weight": np.ones(channels, dtype), "bias": np.zeros(channels, dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype), "running_var": np.ones(channels, dtype)}
        self.no_decay = {"weight", "bias"}

    def forward(self, inputs, training=True, update_stats=True):
        x = inputs[0]
        if x.shape[1] != self.params["weight"].shape[0]:
            raise ValueError(f"batchnorm expects {self.params['weight'].shape[0]} channels, got {x.shape[1]}")
        if training:
            y, cache = B.batchnorm_forward(x, self.params["weight"], self.params["bias"])
            if update_stats:
                B.update_running_stats(self.buffers["running_mean"], self.buffers["running_var"], cache)
        else:
            y, cache = B.batchnorm_forward(x, self.params["weight"], self.params["bias"],
                                           self.buffers["running_mean"], self.buffers["running_var"])
        return y, cache

    def backward(self, cache, dy):
        dx, dw, db = B.batchnorm_vjp(cache, dy)
        return [dx], {"weight": dw, "bias": db}


class ReLU(Layer):
    kind = "relu"

    def forward(self, inputs, training=True, update_stats=True):
        return B.relu_forward(inputs[0]), inputs[0]

    def backward(self, x, dy):
        return [B.relu_vjp(x, dy)], {}


class Add(Layer):
    kind = "add"

    def forward(self, inputs, training=True, update_stats=True):
        a, b = inputs
        if a.shape != b.shape:
            raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return a + b, None

    def backward(self, cache, dy):
        return [dy, dy], {}

    def output_shape(self, in_shapes):
        if in_shapes[0] != in_shapes[1]:
            raise ValueError(f"add: shape mismatch {in_shapes[0]} vs {in_shapes[1]}")
        return in_shapes[0]


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, k=3, stride=2, padding=1):
        super().__init__()
        self.k, self.stride, self.padding = k, stride, padding

    def forward(self, inputs, training=True, update_stats=True):
        x = inputs[0]
        y, idx = B.maxpool_forward(x, self.k, self.stride, self.padding)
        return y, (x.shape, idx)

    def backward(self, cache, dy):
        shape, idx = cache
        return [B.maxpool_vjp(shape, idx, dy, self.k, self.stride, self.padding)], {}

    def output_shape(self, in_shapes):
        return B.maxpool_output_shape(in_shapes[0], self.k, self.stride, self.padding)


class GlobalPool(Layer):
    """Global average pool followed by flattening to [B, C]."""

    kind = "global-pool"

    def forward(self, inputs, training=True, update_stats=True):
        x = inputs[0]
        return global_avg_pool(x).reshape(x.shape[:2]), x.shape

    def backward(self, shape, dy):
        return [global_avg_pool_vjp(shape, dy)], {}

    def output_shape(self, in_shapes):
        return tuple(in_shapes[0][:2])


class Linear(Layer):
    kind = "linear"

    def __init__(self, weight, bias):
        super().__init__()
        self.params = {"weight": weight, "bias": bias}

    def forward(self, inputs, training=True, update_stats=True):
        x = inputs[0]
        return B.linear_forward(x, self.params["weight"], self.params["bias"]), x

    def backward(self, x, dy):
        dx, dw, db = B.linear_vjp(x, self.params["weight"], dy)
        return [dx], {"weight": dw, "bias": db}

    def output_shape(self, in_shapes):
        return (in_shapes[0][0], self.params["weight"].shape[0])


def _predictor_bn_names(params):
    return {n for n in params if n.startswith("bn")}


def _update_predictor_stats(buffers, pred_cache, prefix=""):
    for kind, i, saved in pred_cache["steps"]:
        if kind == "bn":
            B.update_running_stats(buffers[f"{prefix}bn{i}.running_mean"],
                                   buffers[f"{prefix}bn{i}.running_var"], saved)


def _lsa_output_shape(cfg, shape):
    b, c, h, w = shape
    if c != cfg.channels:
        raise ValueError(f"LSA expects {cfg.channels} channels, got {c}")
    if cfg.stride > 1 and (h % cfg.stride or w % cfg.stride):
        raise ValueError(f"strided LSA needs H, W divisible by {cfg.stride}, got {h}x{w}")
    p = cfg.kernel_size // 2
    return (b, c, output_size(h, cfg.kernel_size, cfg.stride, p), output_size(w, cfg.kernel_size, cfg.stride, p))


class Lsa(Layer):
    kind = "lsa"

    def __init__(self, cfg: D.LsaConfig, params, buffers):
        super().__init__()
        self.cfg, self.params, self.buffers = cfg, params, buffers
        self.no_decay = _predictor_bn_names(params)

    def forward(self, inputs, training=True, update_stats=True):
        y, cache = D.lsa_fwd(inputs[0], self.params, self.cfg, None if training else self.buffers)
        if training and update_stats:
            _update_predictor_stats(self.buffers, cache["pred"])
        return y, cache

    def backward(self, cache, dy):
        dx, grads = D.lsa_bwd(cache, dy, self.params, self.cfg)
        return [dx], grads

    def output_shape(self, in_shapes):
        return _lsa_output_shape(self.cfg, in_shapes[0])


class Gsi(Layer):
    kind = "gsi"

    def __init__(self, cfg: D.GsiConfig, params):
        super().__init__()
        self.cfg, self.params = cfg, params

    def forward(self, inputs, training=True, update_stats=True):
        return D.gsi_fwd(inputs[0], self.params, self.cfg)

    def backward(self, cache, dy):
        dx, grads = D.gsi_bwd(cache, dy, self.params, self.cfg)
        return [dx], grads

    def output_shape(self, in_shapes):
        b, c, h, w = in_shapes[0]
        if c != self.cfg.channels:
            raise ValueError(f"GSI expects {self.cfg.channels} channels, got {c}")
        k, s = self.cfg.kernel_size, self.cfg.stride
        return (b, c, output_size(h, k, s, k // 2), output_size(w, k, s, k // 2))


class Dcdc(Layer):
    """LSA branch + GSI branch.  Parameters are prefixed ``lsa.`` / ``gsi.``."""

    kind = "dcdc"

    def __init__(self, lsa_cfg: D.LsaConfig, gsi_cfg: D.GsiConfig, theta, lsa_buffers, gamma):
        super().__init__()
        D._check_branch_cfgs(lsa_cfg, gsi_cfg)
        self.lsa_cfg, self.gsi_cfg = lsa_cfg, gsi_cfg
        self.params = {**{f"lsa.{k}": v for k, v in theta.items()},
                       **{f"gsi.{k}": v for k, v in gamma.items()}}
        self.buffers = {f"lsa.{k}": v for k, v in lsa_buffers.items()}
        self.no_decay = {f"lsa.{n}" for n in _predictor_bn_names(theta)}

    def _split(self, d, prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in d.items() if k.startswith(prefix)}

    @property
    def theta(self):
        return self._split(self.params, "lsa.")

    @property
    def gamma(self):
        return self._split(self.params, "gsi.")

    def forward(self, inputs, training=True, update_stats=True):
        x = inputs[0]
        buffers = None if training else self._split(self.buffers, "lsa.")
        y_lsa, c_lsa = D.lsa_fwd(x, self.theta, self.lsa_cfg, buffers)
        y_gsi, c_gsi = D.gsi_fwd(x, self.gamma, self.gsi_cfg)
        if y_lsa.shape != y_gsi.shape:
            raise ValueError(f"branch outputs differ: {y_lsa.shape} vs {y_gsi.shape}")
        if training and update_stats:
            _update_predictor_stats(self.buffers, c_lsa["pred"], "lsa.")
        return y_lsa + y_gsi, (c_lsa, c_gsi)

    def backward(self, cache, dy):
        c_lsa, c_gsi = cache
        dx_lsa, g_lsa = D.lsa_bwd(c_lsa, dy, self.theta, self.lsa_cfg)
        dx_gsi, g_gsi = D.gsi_bwd(c_gsi, dy, self.gamma, self.gsi_cfg)
        grads = {**{f"lsa.{k}": v for k, v in g_lsa.items()}, **{f"gsi.{k}": v for k, v in g_gsi.items()}}
        return [dx_lsa + dx_gsi], grads

    def output_shape(self, in_shapes):
        return _lsa_output_shape(self.lsa_cfg, in_shapes[0])


# --------------------------------------------------------------------------
# graph + tape
# --------------------------------------------------------------------------

INPUT = "input"


@dataclass
class Node:
    name: str
    layer: Layer
    inputs: tuple[str, ...]


class LayerGraph:
    """Ordered layers; each node names its inputs, so the order is topological."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._by_name: dict[str, Node] = {}

    def add(self, name: str, layer: Layer, *inputs: str) -> str:
        if name in self._by_name or name == INPUT:
            raise ValueError(f"duplicate node name {name!r}")
        if not inputs:
            inputs = (self.output,)
        for i in inputs:
            if i != INPUT and i not in self._by_name:
                raise ValueError(f"node {name!r} reads unknown node {i!r}")
        node = Node(name, layer, tuple(inputs))
        self.nodes.append(node)
        self._by_name[name] = node
        return name

    @property
    def output(self) -> str:
        return self.nodes[-1].name if self.nodes else INPUT

    def __getitem__(self, name: str) -> Layer:
        return self._by_name[name].layer

    def __len__(self):
        return len(self.nodes)

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {f"{n.name}.{k}": v for n in self.nodes for k, v in n.layer.params.items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{n.name}.{k}": v for n in self.nodes for k, v in n.layer.buffers.items()}

    def no_decay(self) -> set[str]:
        return {f"{n.name}.{k}" for n in self.nodes for k in n.layer.no_decay}

    def set_parameter(self, full_name: str, value: np.ndarray):
        # node and parameter names may both contain dots
        for n in self.nodes:
            prefix = n.name + "."
            if full_name.startswith(prefix) and full_name[len(prefix):] in n.layer.params:
                n.layer.params[full_name[len(prefix):]] = value
                return
        raise KeyError(full_name)

    def astype(self, dtype) -> "LayerGraph":
        """Cast every parameter and buffer in place; returns self."""
        for n in self.nodes:
            for d in (n.layer.params, n.layer.buffers):
                for k in d:
                    d[k] = d[k].astype(dtype)
        return self

    def shapes(self, input_shape) -> dict[str, tuple]:
        """Static shape propagation; raises on any mismatch."""
        shapes = {INPUT: tuple(input_shape)}
        for n in self.nodes:
            shapes[n.name] = tuple(n.layer.output_shape([shapes[i] for i in n.inputs]))
        return shapes

    def forward(self, x, training=True, update_stats=True):
        return forward(self, x, training, update_stats)


class Tape:
    """Per-node caches from one forward pass, consumed by a single backward."""

    def __init__(self, graph: LayerGraph | None = None):
        self.graph = graph
        self.entries: list[tuple[Node, object]] = []
        self.input_shape = None
        self.ran = False
        self.consumed = False

    def backward(self, dy):
        return backward(self, dy)


def forward(graph: LayerGraph, x, training=True, update_stats=True):
    tape = Tape(graph)
    tape.input_shape = x.shape
    tape.ran = True
    values = {INPUT: x}
    remaining = _consumer_counts(graph)
    for node in graph.nodes:
        ins = [values[i] for i in node.inputs]
        try:
            y, cache = node.layer.forward(ins, training, update_stats)
        except ValueError as e:
            raise ValueError(f"node {node.name!r} ({node.layer.kind}): {e}") from e
        tape.entries.append((node, cache))
        values[node.name] = y
        for i in node.inputs:
            remaining[i] -= 1
            if remaining[i] == 0 and i != graph.output:
                del values[i]
    return values[graph.output], tape


def _consumer_counts(graph):
    counts = {INPUT: 0, **{n.name: 0 for n in graph.nodes}}
    for n in graph.nodes:
        for i in n.inputs:
            counts[i] += 1
    return counts


def backward(tape: Tape, dy):
    """Reverse sweep.  Returns ``(grads keyed "node.param", d input)``."""
    if not tape.ran:
        raise RuntimeError("backward called before forward")
    if tape.consumed:
        raise RuntimeError("tape already consumed; run forward again")
    graph = tape.graph
    pending = {graph.output: dy}
    grads = {}
    for node, cache in reversed(tape.entries):
        g = pending.pop(node.name, None)
        if g is None:
            for k, v in node.layer.params.items():
                grads[f"{node.name}.{k}"] = np.zeros_like(v)
            continue
        dins, dparams = node.layer.backward(cache, g)
        for k, v in dparams.items():
            grads[f"{node.name}.{k}"] = v
        for name, d in zip(node.inputs, dins):
            pending[name] = pending[name] + d if name in pending else d
    tape.entries.clear()
    tape.consumed = True
    dx = pending.get(INPUT)
    if dx is None:
        dx = np.zeros(tape.input_shape, dtype=dy.dtype)
    return grads, dx


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(graph: LayerGraph, path: str | os.PathLike) -> None:
    """Write ``path`` (concatenated tensor records) and ``path.manifest``.

    Manifest lines: ``name<TAB>kind<TAB>byte offset<TAB>comma-separated shape``
    where kind is ``param`` or ``buffer``.
    """
    lines, chunks, offset = [], [], 0
    for kind, tensors in (("param", graph.named_parameters()), ("buffer", graph.named_buffers())):
        for name, t in tensors.items():
            rec = encode_tensor(np.asarray(t))
            lines.append(f"{name}\t{kind}\t{offset}\t{','.join(map(str, t.shape))}")
            chunks.append(rec)
            offset += len(rec)
    with open(path, "wb") as f:
        f.write(b"".join(chunks))
    with open(f"{os.fspath(path)}.manifest", "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path: str | os.PathLike) -> list[tuple[str, str, int, tuple[int, ...]]]:
    out = []
    with open(f"{os.fspath(path)}.manifest", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            name, kind, offset, shape = line.rstrip("\n").split("\t")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            out.append((name, kind, int(offset), dims))
    return out


def load_checkpoint(graph: LayerGraph, path: str | os.PathLike) -> None:
    with open(path, "rb") as f:
        blob = f.read()
    params, buffers = graph.named_parameters(), graph.named_buffers()
    seen = set()
    for name, kind, offset, shape in read_manifest(path):
        t, _ = decode_tensor(blob, offset)
        if t.shape != shape:
            raise ValueError(f"{name}: manifest shape {shape} != stored {t.shape}")
        target = params if kind == "param" else buffers
        if name not in target:
            raise KeyError(f"checkpoint entry {name!r} not in graph")
        if target[name].shape != shape:
            raise ValueError(f"{name}: graph shape {target[name].shape} != checkpoint {shape}")
        target[name][...] = t
        seen.add(name)
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
