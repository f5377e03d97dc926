"""DCDC-ResNet builder.

Bottleneck ResNets whose 3x3 sites (bottleneck middle conv and the middle
stem conv) carry a configurable operator.  Ablation variants
swap the second branch of the operator for static convolutions.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as A
from . import config
from .dynamic_ops import GsiConfig, LsaConfig, init_gsi_params, init_lsa_params
from .tensor import Rng

# ResNet-26/38 follow the RedNet layouts; 50/101 are the standard ones.
DEPTH_BLOCKS = {26: (1, 2, 4, 1), 38: (2, 3, 5, 2), 50: (3, 4, 6, 3), 101: (3, 4, 23, 3)}

OPERATORS = ("vanilla", "involution", "lsa", "lsa+conv_small", "lsa+conv_large", "dcdc")

ABLATION_ROWS = {
    "rednet": "involution",
    "involution": "involution",
    "lsa": "lsa",
    "conv_small": "lsa+conv_small",
    "conv_large": "lsa+conv_large",
    "gsi": "dcdc",
    "dcdc": "dcdc",
}

CONFIG_ALIASES = {"lambda": "lam"}


@dataclass(frozen=True)
class ModelSpec:
    depth: int = 26
    operator: str = "dcdc"
    k_lsa: int = 7
    k_lsa_dw: int = 3
    n_pairs: int = 2
    alpha: float = 0.25
    group_size: int = 16
    k_gsi: int = 1
    lam: float = 1.0
    num_classes: int = 1000
    in_channels: int = 3
    stem: str = "deep"          # "deep": 3x3 stack + max-pool (/4); "light": one 3x3 conv
    stem_k_lsa: int = 3         # LSA kernel of the dynamic site in the deep stem
    stem_stride: int = 1        # stride of the light stem conv
    stem_width: int = 64
    widths: tuple[int, ...] = (64, 128, 256, 512)
    blocks: tuple[int, ...] | None = None   # overrides the depth table
    expansion: int = 4

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown operator {self.operator!r}; choose from {OPERATORS}")
        if self.blocks is None and self.depth not in DEPTH_BLOCKS:
            raise ValueError(f"unsupported depth {self.depth}; choose from {sorted(DEPTH_BLOCKS)}")
        if self.stem not in ("deep", "light"):
            raise ValueError(f"unknown stem {self.stem!r}")
        if len(self.stage_blocks) != len(self.widths):
            raise ValueError("blocks and widths must have the same length")

    @property
    def stage_blocks(self) -> tuple[int, ...]:
        return tuple(self.blocks) if self.blocks is not None else DEPTH_BLOCKS[self.depth]

    def lsa_config(self, channels: int, stride: int = 1) -> LsaConfig:
        if self.operator == "involution":
            return LsaConfig(channels, self.k_lsa, 0, 2, self.alpha, self.group_size, stride, final_bias=True)
        return LsaConfig(channels, self.k_lsa, self.k_lsa_dw, self.n_pairs, self.alpha,
                         self.group_size, stride)

    def gsi_config(self, channels: int, stride: int = 1) -> GsiConfig:
        return GsiConfig(channels, self.k_gsi, self.lam, stride)


def spec_from_kv(values: dict[str, str], base: ModelSpec | None = None) -> ModelSpec:
    return config.build(ModelSpec, values, CONFIG_ALIASES, base)


MODEL_KEYS = {f.name for f in dataclasses.fields(ModelSpec)} - {"lam"} | {"lambda"}


def ablation_variant(spec: ModelSpec, row: str) -> ModelSpec:
    """Spec for a component-ablation row: rednet, lsa, conv_small, conv_large, gsi/dcdc."""
    if row not in ABLATION_ROWS:
        raise ValueError(f"unknown ablation row {row!r}; choose from {sorted(ABLATION_ROWS)}")
    return dataclasses.replace(spec, operator=ABLATION_ROWS[row])


# --------------------------------------------------------------------------
# builder
# --------------------------------------------------------------------------


class _Builder:
    def __init__(self, spec: ModelSpec, rng: Rng, dtype, zero_init_kernels: bool):
        self.spec, self.rng, self.dtype = spec, rng, dtype
        self.zero = zero_init_kernels
        self.g = A.LayerGraph()

    def kaiming(self, shape, fan_in):
        return self.rng.normal(shape, std=math.sqrt(2.0 / fan_in)).astype(self.dtype)

    def conv(self, name, c_in, c_out, k, stride=1, bias=False, src=None):
        w = self.kaiming((c_out, c_in, k, k), c_in * k * k)
        b = np.zeros(c_out, self.dtype) if bias else None
        return self.g.add(name, A.Conv2d(w, b, stride), *([src] if src else []))

    def bn_relu(self, prefix, c, relu=True, src=None):
        out = self.g.add(f"{prefix}.bn", A.BatchNorm2d(c, self.dtype), *([src] if src else []))
        if relu:
            out = self.g.add(f"{prefix}.relu", A.ReLU())
        return out

    def site(self, name, c_in, c_out, stride):
        """One 3x3 site carrying the configured operator; returns the output node."""
        spec = self.spec
        if spec.operator == "vanilla":
            return self.conv(name, c_in, c_out, 3, stride)
        if c_in != c_out:
            self.conv(f"{name}.proj", c_in, c_out, 1)
        c = c_out
        entry = self.g.output
        lsa_cfg = spec.lsa_config(c, stride)
        theta, bufs = init_lsa_params(lsa_cfg, self.rng, self.zero, self.dtype)
        if spec.operator == "dcdc":
            gsi_cfg = spec.gsi_config(c, stride)
            gamma = init_gsi_params(gsi_cfg, self.rng, self.zero, self.dtype)
            return self.g.add(f"{name}.dcdc", A.Dcdc(lsa_cfg, gsi_cfg, theta, bufs, gamma))
        lsa = self.g.add(f"{name}.lsa", A.Lsa(lsa_cfg, theta, bufs))
        if spec.operator in ("lsa", "involution"):
            return lsa
        if spec.operator == "lsa+conv_small":
            m = spec.gsi_config(c).width
            self.conv(f"{name}.small.pw1", c, m, 1, bias=True, src=entry)
            self.conv(f"{name}.small.conv", m, m, 3, stride, bias=True)
            branch = self.conv(f"{name}.small.pw3", m, c, 1, bias=True)
        else:
            branch = self.conv(f"{name}.large.conv", c, c, 3, stride, src=entry)
        return self.g.add(f"{name}.sum", A.Add(), lsa, branch)

    def stem(self):
        spec = self.spec
        if spec.stem == "light":
            self.conv("stem.conv1", spec.in_channels, spec.stem_width, 3, stride=spec.stem_stride)
            return self.bn_relu("stem.1", spec.stem_width)
        half = spec.stem_width // 2
        self.conv("stem.conv1", spec.in_channels, half, 3, stride=2)
        self.bn_relu("stem.1", half)
        self.spec = dataclasses.replace(spec, k_lsa=spec.stem_k_lsa)
        self.site("stem.site2", half, half, 1)
        self.spec = spec
        self.bn_relu("stem.2", half)
        self.conv("stem.conv3", half, spec.stem_width, 3)
        self.bn_relu("stem.3", spec.stem_width)
        return self.g.add("stem.pool", A.MaxPool(3, 2, 1))

    def bottleneck(self, name, c_in, width, stride):
        c_out = width * self.spec.expansion
        entry = self.g.output
        self.conv(f"{name}.conv1", c_in, width, 1)
        self.bn_relu(f"{name}.1", width)
        self.site(f"{name}.site", width, width, stride)
        self.bn_relu(f"{name}.2", width)
        self.conv(f"{name}.conv3", width, c_out, 1)
        main = self.bn_relu(f"{name}.3", c_out, relu=False)
        if stride != 1 or c_in != c_out:
            self.conv(f"{name}.down", c_in, c_out, 1, stride, src=entry)
            short = self.bn_relu(f"{name}.down", c_out, relu=False)
        else:
            short = entry
        self.g.add(f"{name}.add", A.Add(), main, short)
        self.g.add(f"{name}.relu", A.ReLU())
        return c_out

    def build(self) -> A.LayerGraph:
        spec = self.spec
        self.stem()
        c = spec.stem_width
        for si, (nb, width) in enumerate(zip(spec.stage_blocks, spec.widths)):
            for bi in range(nb):
                stride = 2 if (bi == 0 and si > 0) else 1
                c = self.bottleneck(f"layer{si + 1}.{bi}", c, width, stride)
        self.g.add("pool", A.GlobalPool())
        w = self.kaiming((spec.num_classes, c), c)
        self.g.add("fc", A.Linear(w, np.zeros(spec.num_classes, self.dtype)))
        return self.g


def build_model(spec: ModelSpec, rng: Rng | int = 0, dtype=np.float64,
                zero_init_kernels: bool = False) -> A.LayerGraph:
    """Kaiming fan-in init for every weight, biases zero.  With
    ``zero_init_kernels`` the final LSA predictor layer and the GSI kernel
    layer start at zero (sites then output 0 and train poorly behind BN)."""
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    return _Builder(spec, rng, dtype, zero_init_kernels).build()


def count_parameters(graph: A.LayerGraph) -> int:
    return sum(int(v.size) for v in graph.named_parameters().values())


# --------------------------------------------------------------------------
# desk-scale models
# --------------------------------------------------------------------------


def small_spec(operator: str = "dcdc", base_width: int = 16, blocks=(2, 2, 2), num_classes: int = 3,
               in_channels: int = 1, **kw) -> ModelSpec:
    """Light-stem bottleneck net for 32x32 inputs: widths base*(1, 2, 4, ...), expansion 2.

    The stem conv has stride 2, so the stages run at 16, 8, 4, ... pixels.
    """
    widths = tuple(base_width * 2 ** i for i in range(len(blocks)))
    defaults = dict(k_lsa=5, group_size=8, stem_stride=2)
    defaults.update(kw)
    return ModelSpec(depth=0, operator=operator, blocks=tuple(blocks), widths=widths,
                     stem="light", stem_width=base_width, expansion=2,
                     num_classes=num_classes, in_channels=in_channels, **defaults)


def param_matched(spec: ModelSpec, operator: str = "vanilla", max_base: int = 256) -> ModelSpec:
    """Same depth/layout with ``operator``; base width chosen so the parameter
    count is closest to that of ``spec``."""
    target = count_parameters(build_model(spec, 0))
    ratios = [w / spec.stem_width for w in spec.widths]
    best, best_gap = None, None
    for base in range(1, max_base + 1):
        widths = tuple(max(1, int(round(base * r))) for r in ratios)
        cand = dataclasses.replace(spec, operator=operator, stem_width=base, widths=widths)
        gap = abs(count_parameters(build_model(cand, 0)) - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = cand, gap
        elif count_parameters(build_model(cand, 0)) > target:
            break
    return best
