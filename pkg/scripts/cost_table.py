"""Params and FLOPs at 224x224 for every depth/operator pair and the
component ablation rows of DCDC-ResNet-26."""
import argparse

from dcdc.analysis import count_flops
from dcdc.network import DEPTH_BLOCKS, ModelSpec, ablation_variant, build_model

OPERATORS = ("vanilla", "involution", "dcdc")


def row(label, spec, resolution):
    rep = count_flops(build_model(spec, 0), (3, resolution, resolution))
    print(f"{label:<28}{rep.params / 1e6:>10.3f}M{rep.flops / 1e9:>10.3f}G")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--resolution", type=int, default=224)
    args = ap.parse_args()
    print(f"{'model':<28}{'params':>11}{'FLOPs':>11}")
    for depth in DEPTH_BLOCKS:
        for op in OPERATORS:
            row(f"{op}-{depth}", ModelSpec(depth=depth, operator=op), args.resolution)
    print()
    for name in ("rednet", "lsa", "conv_small", "conv_large", "dcdc"):
        row(f"ablation {name}", ablation_variant(ModelSpec(depth=26), name), args.resolution)


if __name__ == "__main__":
    main()
