"""Dual complementary dynamic convolution on numpy.

Operators (conv, LSA and GSI branches, DCDC) with hand-written VJPs, a
small reverse-mode tape, DCDC-ResNet builders, cost accounting and a
desk-scale training harness.
"""
from .dynamic_ops import (GsiConfig, LsaConfig, dcdc_forward, dcdc_vjp, gsi_forward, gsi_predict,
                          gsi_vjp, lsa_branch, lsa_forward, lsa_predict, lsa_vjp)
from .network import ModelSpec, build_model, small_spec
from .static_ops import ConvWeights, conv2d_forward, conv2d_vjp
from .tensor import Rng, read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "ConvWeights", "GsiConfig", "LsaConfig", "ModelSpec", "Rng",
    "build_model", "conv2d_forward", "conv2d_vjp", "dcdc_forward", "dcdc_vjp",
    "gsi_forward", "gsi_predict", "gsi_vjp", "lsa_branch", "lsa_forward", "lsa_predict",
    "lsa_vjp", "read_tensor", "small_spec", "write_tensor",
]
