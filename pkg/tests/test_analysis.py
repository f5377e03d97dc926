import glob
import os

import numpy as np
import pytest

from dcdc import autodiff as A
from dcdc.analysis import count_flops, count_params, dump_kernels, dynamic_kernels, layer_macs, read_pgm, write_pgm
from dcdc.dynamic_ops import LsaConfig, init_lsa_params
from dcdc.network import ModelSpec, build_model, small_spec
from dcdc.tensor import Rng, read_tensor


def _single(layer, shape):
    g = A.LayerGraph()
    g.add("op", layer)
    return g, shape


def test_pointwise_and_depthwise_params():
    g, _ = _single(A.Conv2d(np.zeros((8, 4, 1, 1)), np.zeros(8)), None)
    assert count_params(g).params == 40
    g, _ = _single(A.Conv2d(np.zeros((8, 1, 3, 3)), groups=8), None)
    assert count_params(g).params == 72


def test_conv_macs():
    g = A.LayerGraph()
    g.add("conv", A.Conv2d(np.zeros((2, 2, 3, 3))))
    assert count_flops(g, (2, 4, 4)).flops == 576


def test_lsa_apply_macs():
    cfg = LsaConfig(4, kernel_size=3, group_size=4)
    theta, bufs = init_lsa_params(cfg, Rng(0))
    layer = A.Lsa(cfg, theta, bufs)
    total = layer_macs(layer, [(1, 4, 4, 4)], (1, 4, 4, 4))
    # predictor: dw 4*9*16, pw 4->1 (alpha*C = 1) *16, dw 1*9*16, pw 1->9 *16
    predictor = 4 * 9 * 16 + 4 * 1 * 16 + 1 * 9 * 16 + 1 * 9 * 16
    assert total - predictor == 576


def test_report_totals_and_csv():
    g = build_model(small_spec(base_width=8, blocks=(1, 1)), 0)
    rep = count_flops(g, (1, 32, 32))
    assert rep.params == sum(r.params for r in rep.rows) == count_params(g).params
    assert rep.params == sum(v.size for v in g.named_parameters().values())
    lines = rep.to_csv().splitlines()
    assert lines[0] == "layer,type,params,flops" and len(lines) == len(g) + 1
    assert count_flops(g, (3, 1, 32, 32)).flops == 3 * rep.flops


def test_params_match_checkpoint_manifest(tmp_path):
    g = build_model(small_spec(base_width=8, blocks=(1, 1)), 0)
    A.save_checkpoint(g, tmp_path / "ck")
    entries = A.read_manifest(tmp_path / "ck")
    n = sum(int(np.prod(shape)) for _, kind, _, shape in entries if kind == "param")
    assert n == count_params(g).params


def test_flops_scale_with_resolution():
    g = build_model(ModelSpec(depth=26, operator="vanilla", num_classes=10), 0)
    small, big = count_flops(g, (3, 64, 64)).by_name(), count_flops(g, (3, 128, 128)).by_name()
    for name in ("layer1.0.conv1", "layer1.0.site", "layer3.1.conv3", "stem.conv3"):
        assert big[name].flops == 4 * small[name].flops
    d = build_model(ModelSpec(depth=26, num_classes=10), 0)
    a, b = count_flops(d, (3, 64, 64)).by_name(), count_flops(d, (3, 128, 128)).by_name()
    # every term of a stride-1 dynamic site is per-pixel except GSI pw2 on the pooled vector
    site = d["layer1.0.site.dcdc"]
    m, kk = site.gsi_cfg.width, site.gsi_cfg.kernel_size ** 2
    pooled = m ** 3 * kk
    assert b["layer1.0.site.dcdc"].flops - pooled == 4 * (a["layer1.0.site.dcdc"].flops - pooled)


def test_dcdc_50_flops_near_table():
    rep = count_flops(build_model(ModelSpec(depth=50), 0), (3, 224, 224))
    assert abs(rep.flops / 2.68e9 - 1) <= 0.15


def test_shape_mismatch():
    g = A.LayerGraph()
    g.add("conv", A.Conv2d(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ValueError):
        count_flops(g, (3, 4, 4))


def test_pgm_roundtrip(tmp_path):
    img = np.array([[0.0, 1.0], [2.0, 4.0]])
    write_pgm(tmp_path / "a.pgm", img)
    assert read_pgm(tmp_path / "a.pgm").tolist() == [[0, 64], [128, 255]]
    write_pgm(tmp_path / "b.pgm", np.ones((2, 3)))
    assert read_pgm(tmp_path / "b.pgm").shape == (2, 3)


def test_dump_file_counts_and_roundtrip(tmp_path, rng):
    g = build_model(small_spec(base_width=16, blocks=(1,)), 0)
    x = rng.normal((2, 1, 32, 32))
    layer = "layer1.0.site.dcdc"
    dump_kernels(g, x, layer, tmp_path)
    kern = dynamic_kernels(g, x, layer)
    b, groups, _, ho, wo = kern["lsa"].shape
    for bi in range(b):
        for gi in range(groups):
            assert len(glob.glob(os.path.join(tmp_path, "lsa", f"b{bi}_g{gi}", "*.pgm"))) == ho * wo
    assert len(glob.glob(os.path.join(tmp_path, "gsi", "*.pgm"))) == b
    assert read_tensor(tmp_path / "lsa_kernels.dcdc").tobytes() == kern["lsa"].tobytes()
    for bi in range(b):
        assert read_tensor(tmp_path / "gsi" / f"b{bi}.dcdc").tobytes() == kern["gsi"][bi].tobytes()


def test_dump_rejects_static_layer(tmp_path, rng):
    g = build_model(small_spec(base_width=8, blocks=(1,)), 0)
    with pytest.raises(ValueError, match="no dynamic kernels"):
        dump_kernels(g, rng.normal((1, 1, 32, 32)), "stem.conv1", tmp_path)
