import dataclasses

import numpy as np
import pytest

from dcdc import autodiff as A
from dcdc.network import (DEPTH_BLOCKS, ModelSpec, OPERATORS, ablation_variant, build_model, count_parameters,
                          param_matched, small_spec, spec_from_kv)
from dcdc.config import ConfigError


def _params(**kw):
    return count_parameters(build_model(ModelSpec(**kw), 0))


def test_vanilla_26_params_near_table():
    assert abs(_params(depth=26, operator="vanilla") / 13.7e6 - 1) <= 0.15


def test_dcdc_26_params_near_table():
    assert abs(_params(depth=26) / 9.36e6 - 1) <= 0.15


@pytest.mark.parametrize("row, target", [("lsa", 9.26e6), ("conv_large", 14.32e6)])
def test_ablation_rows_near_table(row, target):
    spec = ablation_variant(ModelSpec(depth=26), row)
    assert abs(count_parameters(build_model(spec, 0)) / target - 1) <= 0.15


def test_ablation_ordering():
    base = ModelSpec(depth=26)
    counts = [count_parameters(build_model(ablation_variant(base, r), 0))
              for r in ("lsa", "conv_small", "dcdc", "conv_large")]
    assert counts == sorted(counts) and len(set(counts)) == 4
    assert ablation_variant(base, "dcdc") == base
    with pytest.raises(ValueError):
        ablation_variant(base, "nope")


def test_forward_shape_contract():
    g = build_model(ModelSpec(depth=26, num_classes=2), 0)
    for hw in ((32, 32), (64, 32)):
        y, _ = g.forward(np.random.default_rng(0).normal(size=(2, 3) + hw), update_stats=False)
        assert y.shape == (2, 2) and np.all(np.isfinite(y))


@pytest.mark.parametrize("operator", OPERATORS)
def test_small_nets_build_and_run(operator):
    g = build_model(small_spec(operator, base_width=8, blocks=(1, 1)), 0)
    y, tape = g.forward(np.ones((2, 1, 32, 32)))
    assert y.shape == (2, 3)
    grads, _ = tape.backward(np.ones_like(y))
    assert set(grads) == set(g.named_parameters())


def test_every_site_carries_the_operator():
    g = build_model(ModelSpec(depth=50), 0)
    sites = [n.name for n in g.nodes if isinstance(n.layer, A.Dcdc)]
    assert len(sites) == sum(DEPTH_BLOCKS[50]) + 1
    assert "stem.site2.dcdc" in sites
    v = build_model(ModelSpec(depth=50, operator="vanilla"), 0)
    assert not any(isinstance(n.layer, (A.Dcdc, A.Lsa, A.Gsi)) for n in v.nodes)


def test_deterministic_build():
    a, b = build_model(small_spec(), 3), build_model(small_spec(), 3)
    pa, pb = a.named_parameters(), b.named_parameters()
    assert all(pa[k].tobytes() == pb[k].tobytes() for k in pa)
    c = build_model(small_spec(), 4).named_parameters()
    assert any(pa[k].tobytes() != c[k].tobytes() for k in pa if pa[k].size > 1)


def test_spec_validation():
    with pytest.raises(ValueError, match="depth"):
        ModelSpec(depth=27)
    with pytest.raises(ValueError, match="operator"):
        ModelSpec(operator="magic")
    with pytest.raises(ValueError):
        build_model(ModelSpec(k_lsa=4), 0)


def test_spec_from_kv():
    spec = spec_from_kv({"depth": "50", "operator": "lsa", "lambda": "1.5", "k_gsi": "3"})
    assert (spec.depth, spec.operator, spec.lam, spec.k_gsi) == (50, "lsa", 1.5, 3)
    with pytest.raises(ConfigError):
        spec_from_kv({"depht": "50"})
    with pytest.raises(ConfigError):
        spec_from_kv({"depth": "fifty"})


def test_param_matched_is_closest():
    spec = small_spec("dcdc")
    target = count_parameters(build_model(spec, 0))
    van = param_matched(spec)
    got = count_parameters(build_model(van, 0))
    assert van.operator == "vanilla" and van.stage_blocks == spec.stage_blocks
    for base in (van.stem_width - 1, van.stem_width + 1):
        other = dataclasses.replace(van, stem_width=base, widths=tuple(base * 2 ** i for i in range(3)))
        assert abs(count_parameters(build_model(other, 0)) - target) >= abs(got - target)
