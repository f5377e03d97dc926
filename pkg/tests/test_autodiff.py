import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcdc import autodiff as A
from dcdc import basic_ops as B
from dcdc import gradcheck
from dcdc.network import build_model, small_spec
from dcdc.tensor import Rng


def _pw(rng, c_out, c_in):
    return A.Conv2d(rng.normal((c_out, c_in, 1, 1)))


def test_empty_graph_is_identity(rng):
    x = rng.normal((2, 3, 4, 4))
    y, tape = A.LayerGraph().forward(x)
    assert y is x
    grads, dx = tape.backward(np.ones_like(x))
    assert grads == {} and np.array_equal(dx, np.ones_like(x))


def test_pointwise_composition_equals_matmul(rng):
    g = A.LayerGraph()
    g.add("a", _pw(rng, 5, 3))
    g.add("b", _pw(rng, 2, 5))
    x = rng.normal((2, 3, 4, 4))
    y, _ = g.forward(x)
    w = g["b"].params["weight"][:, :, 0, 0] @ g["a"].params["weight"][:, :, 0, 0]
    np.testing.assert_allclose(y, np.einsum("oc,bchw->bohw", w, x), rtol=1e-12, atol=1e-14)


def test_residual_add_of_zero_branch(rng):
    g = A.LayerGraph()
    g.add("zero", A.Conv2d(np.zeros((3, 3, 3, 3))))
    g.add("sum", A.Add(), "zero", A.INPUT)
    x = rng.normal((1, 3, 5, 5))
    y, tape = g.forward(x)
    assert np.array_equal(y, x)
    dy = rng.normal(x.shape)
    grads, dx = tape.backward(dy)
    # the sum node hands dy to both parents; the zero conv adds nothing to dx
    assert np.array_equal(dx, dy)


def test_sum_distributes_to_both_parents(rng):
    g = A.LayerGraph()
    g.add("left", A.ReLU(), A.INPUT)
    g.add("right", A.ReLU(), A.INPUT)
    g.add("sum", A.Add(), "left", "right")
    x = np.abs(rng.normal((1, 2, 3, 3))) + 0.1
    _, tape = g.forward(x)
    dy = rng.normal(x.shape)
    _, dx = tape.backward(dy)
    assert np.array_equal(dx, dy + dy)


def test_linear_head_analytic_grads(rng):
    g = A.LayerGraph()
    g.add("pool", A.GlobalPool())
    w, b = rng.normal((4, 3)), rng.normal(4)
    g.add("fc", A.Linear(w, b))
    x = rng.normal((2, 3, 2, 2))
    y, tape = g.forward(x)
    pooled = x.mean(axis=(2, 3))
    np.testing.assert_allclose(y, pooled @ w.T + b, rtol=1e-13)
    dy = rng.normal(y.shape)
    grads, dx = tape.backward(dy)
    np.testing.assert_allclose(grads["fc.weight"], dy.T @ pooled, rtol=1e-13)
    np.testing.assert_allclose(grads["fc.bias"], dy.sum(0), rtol=1e-13)
    np.testing.assert_allclose(dx, np.broadcast_to((dy @ w)[:, :, None, None] / 4, x.shape), rtol=1e-13)


def test_zero_dy_gives_zero_grads(rng):
    g = build_model(small_spec(base_width=8, blocks=(1,), in_channels=2), rng)
    y, tape = g.forward(rng.normal((2, 2, 8, 8)))
    grads, dx = tape.backward(np.zeros_like(y))
    assert set(grads) == set(g.named_parameters())
    assert not dx.any() and not any(v.any() for v in grads.values())


def test_tape_errors(rng):
    g = A.LayerGraph()
    g.add("relu", A.ReLU())
    with pytest.raises(RuntimeError, match="before forward"):
        A.Tape(g).backward(np.zeros(1))
    y, tape = g.forward(rng.normal((1, 1, 2, 2)))
    tape.backward(y)
    with pytest.raises(RuntimeError, match="consumed"):
        tape.backward(y)


def test_graph_construction_errors(rng):
    g = A.LayerGraph()
    g.add("a", A.ReLU())
    with pytest.raises(ValueError, match="duplicate"):
        g.add("a", A.ReLU())
    with pytest.raises(ValueError, match="unknown"):
        g.add("b", A.Add(), "a", "nope")
    g.add("conv", A.Conv2d(rng.normal((2, 3, 3, 3))))
    with pytest.raises(ValueError, match="conv"):
        g.forward(rng.normal((1, 4, 5, 5)))
    with pytest.raises(ValueError):
        g.shapes((1, 4, 5, 5))
    assert g.shapes((1, 3, 5, 5))["conv"] == (1, 2, 5, 5)


def test_batchnorm_of_standardized_input(rng):
    x = rng.normal((4, 3, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    ones, zeros = np.ones(3), np.zeros(3)
    y, _ = B.batchnorm_forward(x, ones, zeros, eps=0.0)
    assert np.abs(y - x).max() <= 1e-10
    y, _ = B.batchnorm_forward(x, ones, zeros)   # default eps only rescales by 1/sqrt(1+eps)
    assert np.abs(y - x).max() <= 1e-5 * np.abs(x).max()


def test_batchnorm_running_stats(rng):
    bn = A.BatchNorm2d(2)
    x = rng.normal((3, 2, 4, 4)) * 2 + 1
    bn.forward([x])
    n = 3 * 16
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1), rtol=1e-12)
    before = bn.buffers["running_mean"].copy()
    bn.forward([x], update_stats=False)
    bn.forward([x], training=False)
    assert np.array_equal(before, bn.buffers["running_mean"])


def test_relu_values():
    assert B.relu_forward(np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]


@pytest.mark.parametrize("op", ["batchnorm", "batchnorm_eval", "relu", "maxpool", "gap", "avgpool", "linear", "add"])
def test_layer_gradients(op):
    (result,) = gradcheck.run([op])
    assert result.passed, result


@pytest.mark.slow
def test_three_block_net_gradients():
    (result,) = gradcheck.run(["graph"])
    assert result.passed, result


def test_rerun_is_bit_identical(rng):
    spec = small_spec(base_width=8, blocks=(1, 1), in_channels=2)
    x = rng.normal((2, 2, 8, 8))
    runs = []
    for _ in range(2):
        g = build_model(spec, 5)
        y, tape = g.forward(x)
        grads, dx = tape.backward(np.ones_like(y))
        runs.append((y, dx, grads))
    assert np.array_equal(runs[0][0], runs[1][0]) and np.array_equal(runs[0][1], runs[1][1])
    assert all(np.array_equal(runs[0][2][k], runs[1][2][k]) for k in runs[0][2])


def test_no_decay_tags_cover_batchnorm_only(rng):
    g = build_model(small_spec(base_width=8, blocks=(1,)), rng)
    tagged = g.no_decay()
    bn_params = {f"{n.name}.{k}" for n in g.nodes if isinstance(n.layer, A.BatchNorm2d) for k in n.layer.params}
    predictor_bn = {k for k in g.named_parameters() if ".lsa.bn" in k}
    assert predictor_bn and tagged == bn_params | predictor_bn


def test_set_parameter_with_dotted_names(rng):
    g = build_model(small_spec(base_width=8, blocks=(1,)), rng)
    name = next(k for k in g.named_parameters() if k.startswith("layer1.0.site"))
    g.set_parameter(name, np.zeros_like(g.named_parameters()[name]))
    assert not g.named_parameters()[name].any()
    with pytest.raises(KeyError):
        g.set_parameter("layer1.0.site.nothing", np.zeros(1))


def test_checkpoint_roundtrip(tmp_path, rng):
    spec = small_spec(base_width=8, blocks=(1,))
    g = build_model(spec, 1)
    g.forward(rng.normal((2, 1, 8, 8)))   # move the running stats off their init
    A.save_checkpoint(g, tmp_path / "ck.dcdc")
    h = build_model(spec, 2)
    A.load_checkpoint(h, tmp_path / "ck.dcdc")
    for a, b in ((g.named_parameters(), h.named_parameters()), (g.named_buffers(), h.named_buffers())):
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    entries = A.read_manifest(tmp_path / "ck.dcdc")
    assert {e[1] for e in entries} == {"param", "buffer"} and entries[0][2] == 0
    with pytest.raises((KeyError, ValueError)):
        A.load_checkpoint(build_model(small_spec(base_width=4, blocks=(1,)), 0), tmp_path / "ck.dcdc")


@given(st.integers(0, 2**32))
def test_maxpool_adjoint_property(seed):
    r = Rng(seed)
    x = r.normal((1, 2, 5, 6))
    y, idx = B.maxpool_forward(x)
    dy = r.normal(y.shape)
    dx = B.maxpool_vjp(x.shape, idx, dy)
    # routing gradient is a permutation-like scatter: total mass is conserved
    assert dx.sum() == pytest.approx(dy.sum(), rel=1e-12, abs=1e-12)
    assert np.sum(dx * x) == pytest.approx(np.sum(dy * y), rel=1e-12, abs=1e-12)
