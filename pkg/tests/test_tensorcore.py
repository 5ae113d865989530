import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import analytic_grads, numeric_grads, rel_err
from pulsebench import tscan
from pulsebench.tensorcore import (Graph, ModelParams, OptimizerState, ShapeError, backward, forward,
                                   init_params, load_params, optimizer_step, precision, save_params)
from pulsebench.tensorcore.ops import _unbroadcast

SEEDS = range(20)


def _weighted(g, node, shape, rng):
    """Scalar readout sum(node * R) with a fixed random R, so every output entry matters."""
    w = g.const(rng.standard_normal(shape))
    return g.sum(g.mul(node, w))


def _case_binary(op, sa, sb, positive_b=False):
    def build(rng):
        g = Graph()
        a, b = g.param("a", sa), g.param("b", sb)
        y = getattr(g, op)(a, b)
        bv = rng.standard_normal(sb)
        if positive_b:
            bv = np.sign(bv) * rng.uniform(0.5, 2.0, sb)
        return g, y, {"a": rng.standard_normal(sa), "b": bv}
    return build


def _case_dense(rng):
    g = Graph()
    y = g.dense(g.param("x", (4, 5)), g.param("w", (5, 3)), g.param("b", (3,)))
    return g, y, {k: rng.standard_normal(s) for k, s in (("x", (4, 5)), ("w", (5, 3)), ("b", (3,)))}


def _case_conv(k, stride, padding, bias=True):
    def build(rng):
        g = Graph()
        xs, ws = (2, 5, 6, 3), (k, k, 3, 4)
        b = g.param("b", (4,)) if bias else None
        y = g.conv2d(g.param("x", xs), g.param("w", ws), b, stride=stride, padding=padding)
        p = {"x": rng.standard_normal(xs), "w": rng.standard_normal(ws)}
        if bias:
            p["b"] = rng.standard_normal(4)
        return g, y, p
    return build


def _case_unary(op, shape=(3, 4), **kw):
    def build(rng):
        g = Graph()
        y = getattr(g, op)(g.param("x", shape), **kw)
        return g, y, {"x": rng.standard_normal(shape)}
    return build


def _case_reshape(rng):
    g = Graph()
    y = g.reshape(g.param("x", (2, 6)), (3, 4))
    return g, y, {"x": rng.standard_normal((2, 6))}


def _case_mse(rng):
    g = Graph()
    y = g.mse_loss(g.param("p", (3, 5)), g.param("t", (3, 5)))
    return g, y, {"p": rng.standard_normal((3, 5)), "t": rng.standard_normal((3, 5))}


CASES = {
    "identity": _case_unary("identity"),
    "add": _case_binary("add", (3, 4), (1, 4)),
    "sub": _case_binary("sub", (2, 3, 4), (4,)),
    "mul": _case_binary("mul", (3, 4), (3, 1)),
    "div": _case_binary("div", (3, 4), (3, 4), positive_b=True),
    "scalar_mul": _case_unary("scalar_mul", c=-1.7),
    "tanh": _case_unary("tanh"),
    "sigmoid": _case_unary("sigmoid"),
    "dropout": _case_unary("dropout", shape=(5, 6), rate=0.3),
    "sum_all": _case_unary("sum", shape=(2, 3, 4)),
    "sum_keepdims": _case_unary("sum", shape=(2, 3, 4), axes=(1, 2), keepdims=True),
    "sum_axis": _case_unary("sum", shape=(2, 3, 4), axes=(0,)),
    "reshape": _case_reshape,
    "standardize": _case_unary("standardize", shape=(3, 7)),
    "mse_loss": _case_mse,
    "dense": _case_dense,
    "conv2d_same": _case_conv(3, 1, "same"),
    "conv2d_valid_stride2": _case_conv(3, 2, "valid"),
    "conv2d_1x1_nobias": _case_conv(1, 1, "same", bias=False),
    "avg_pool2d": _case_unary("avg_pool2d", shape=(2, 4, 6, 3)),
    "temporal_shift": _case_unary("temporal_shift", shape=(8, 2, 2, 8), frames=4, fraction=0.25),
}


def primitive_worst_error(name, seeds=SEEDS):
    """Largest analytic-vs-numeric relative error of one primitive over ``seeds`` (float64)."""
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        g, y, params = CASES[name](rng)
        forward(g, {}, params, rng=np.random.default_rng(seed))
        shape = g.values[y].shape
        loss = y if g.values[y].size == 1 else _weighted(g, y, shape, rng)
        g.output("loss", loss)
        a = analytic_grads(g, {}, params, rng_seed=seed)
        n = numeric_grads(g, {}, params, rng_seed=seed)
        worst = max([worst] + [rel_err(a[k], n[k]) for k in params])
    return worst


def _tiny_net():
    return tscan.TsCanConfig(window_frames=4, input_resolution=4, channels=(4, 8), hidden=3)


def network_worst_error(seeds=SEEDS, n_clips=2, entries=6):
    """Same check for the whole tiny network, on ``entries`` random entries per tensor (float64)."""
    cfg = _tiny_net()
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(100 + seed)
        g = tscan.build_graph(cfg, n_clips)
        params = {k: v.astype(np.float64) for k, v in tscan.init_tscan(cfg, seed).tensors.items()}
        for k in params:
            if k.endswith(".b"):
                params[k] = 0.1 * rng.standard_normal(params[k].shape)
        shape = (n_clips, cfg.window_frames, cfg.input_resolution, cfg.input_resolution, 3)
        inputs = {"motion": rng.standard_normal(shape), "appearance": rng.standard_normal(shape),
                  "target": rng.standard_normal((n_clips, cfg.window_frames))}
        forward(g, inputs, params, rng=np.random.default_rng(seed))
        analytic = backward(g, "loss")
        eps = 1e-6
        for name, value in params.items():
            flat = value.reshape(-1)
            idx = rng.choice(flat.size, size=min(flat.size, entries), replace=False)
            num = np.empty(len(idx))
            for j, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + eps
                up = float(forward(g, inputs, params, rng=np.random.default_rng(seed))["loss"])
                flat[i] = old - eps
                down = float(forward(g, inputs, params, rng=np.random.default_rng(seed))["loss"])
                flat[i] = old
                num[j] = (up - down) / (2 * eps)
            worst = max(worst, rel_err(analytic[name].reshape(-1)[idx], num))
    return worst


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradient_matches_finite_differences(name, float64):
    assert primitive_worst_error(name) < 1e-3


def test_full_network_gradient_matches_finite_differences(float64):
    assert network_worst_error() < 1e-2


# -- graph semantics -----------------------------------------------------------

def test_shape_error_names_the_node():
    g = Graph()
    a, b = g.param("a", (2, 3)), g.param("b", (4,))
    g.add(a, b)
    with pytest.raises(ShapeError, match="node 2"):
        forward(g, {}, {"a": np.zeros((2, 3), np.float32), "b": np.zeros(4, np.float32)})


def test_param_shape_mismatch_is_rejected():
    g = Graph()
    g.param("w", (2, 2))
    with pytest.raises(ShapeError, match="param 'w'"):
        forward(g, {}, {"w": np.zeros((3, 2), np.float32)})


def test_backward_requires_scalar_and_prior_forward():
    g = Graph()
    x = g.param("x", (3,))
    y = g.tanh(x)
    with pytest.raises(RuntimeError):
        backward(g, y)
    forward(g, {}, {"x": np.ones(3, np.float32)})
    with pytest.raises(ValueError, match="not scalar"):
        backward(g, y)


def test_unused_and_frozen_parameters():
    g = Graph()
    x = g.param("x", (2,))
    g.param("unused", (3,))
    g.output("loss", g.sum(g.tanh(x)))
    forward(g, {}, {"x": np.zeros(2, np.float32), "unused": np.ones(3, np.float32)})
    grads = backward(g, "loss")
    assert np.array_equal(grads["unused"], np.zeros(3))
    assert set(backward(g, "loss", trainable={"x"})) == {"x"}


def test_dropout_is_identity_without_rng():
    g = Graph()
    x = g.param("x", (50,))
    g.output("y", g.dropout(x, 0.5))
    v = np.arange(50, dtype=np.float32)
    assert np.array_equal(forward(g, {}, {"x": v})["y"], v)


def test_temporal_shift_moves_channel_folds():
    g = Graph()
    x = g.input("x", (3, 1, 1, 4))
    g.output("y", g.temporal_shift(x, 3, 0.25))
    v = np.arange(12, dtype=np.float32).reshape(3, 1, 1, 4)
    y = forward(g, {"x": v}, {})["y"][:, 0, 0]
    assert y[:, 0].tolist() == [0, 0, 4]  # pulled from t-1
    assert y[:, 1].tolist() == [5, 9, 0]  # pulled from t+1
    assert np.array_equal(y[:, 2:], v[:, 0, 0, 2:])


def test_temporal_shift_zero_fold_is_identity():
    g = Graph()
    x = g.input("x", (4, 2, 2, 3))
    g.output("y", g.temporal_shift(x, 2, 0.25))
    v = np.random.default_rng(0).standard_normal((4, 2, 2, 3)).astype(np.float32)
    assert np.array_equal(forward(g, {"x": v}, {})["y"], v)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 5, 5, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    g = Graph()
    g.output("y", g.conv2d(g.input("x"), g.param("w", w.shape)))
    with precision(np.float64):
        y = forward(g, {"x": x}, {"w": w})["y"]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 5, 5, 3))
    for i in range(5):
        for j in range(5):
            ref[0, i, j] = np.einsum("abc,abco->o", xp[0, i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(y, ref, rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.data())
def test_unbroadcast_inverts_broadcasting(shape, data):
    target = tuple(data.draw(st.sampled_from([1, s])) for s in shape)
    lead = data.draw(st.integers(0, 2))
    full = (2,) * lead + tuple(shape)
    g = np.ones(full)
    out = _unbroadcast(g, target)
    assert out.shape == target
    assert out.sum() == g.sum()


# -- parameters, optimizers, checkpoints ----------------------------------------

def test_sgd_step_is_plain_gradient_descent():
    p = ModelParams({"w": np.array([1.0, -2.0], np.float32)})
    new = optimizer_step(p, {"w": np.array([0.5, 0.5], np.float32)}, OptimizerState("sgd", 0.1))
    np.testing.assert_allclose(new["w"], [0.95, -2.05], rtol=1e-6)
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_moves_by_learning_rate():
    p = ModelParams({"w": np.zeros(3, np.float32)})
    state = OptimizerState("adam", 0.001)
    new = optimizer_step(p, {"w": np.array([3.0, -0.2, 1e-3], np.float32)}, state)
    np.testing.assert_allclose(new["w"], [-0.001, 0.001, -0.001], rtol=1e-4)
    assert state.step == 1


def test_zero_learning_rate_is_bitwise_identity():
    p = init_params({"w": (4, 3), "b": (3,)}, 0)
    grads = {"w": np.ones((4, 3), np.float32), "b": np.ones(3, np.float32)}
    for kind in ("sgd", "adam"):
        assert optimizer_step(p, grads, OptimizerState(kind, 0.0)).equals(p)


def test_frozen_leaves_pass_through_and_missing_grads_fail():
    p = init_params({"w": (2, 2), "b": (2,)}, 1).freeze(["b"])
    new = optimizer_step(p, {"w": np.ones((2, 2), np.float32)}, OptimizerState("sgd", 1.0))
    assert new["b"] is p["b"]
    with pytest.raises(KeyError):
        optimizer_step(ModelParams(p.tensors), {}, OptimizerState("sgd", 1.0))


def test_glorot_limits_and_zero_bias():
    p = init_params({"conv.w": (3, 3, 4, 8), "dense.w": (10, 6), "dense.b": (6,)}, 7)
    assert np.abs(p["conv.w"]).max() <= np.sqrt(6 / (36 + 72))
    assert np.abs(p["dense.w"]).max() <= np.sqrt(6 / 16)
    assert not p["dense.b"].any()


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    p = init_params({"a.w": (3, 3, 2, 4), "a.b": (4,), "s": (1,)}, 5)
    save_params(p, tmp_path / "c.pbp")
    q = load_params(tmp_path / "c.pbp")
    assert q.equals(p)
    assert list(q.tensors) == list(p.tensors)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOTPARAMS")
    with pytest.raises(ValueError):
        load_params(tmp_path / "bad")
    p = init_params({"w": (2,)}, 0)
    save_params(p, tmp_path / "c")
    (tmp_path / "c").write_bytes((tmp_path / "c").read_bytes() + b"x")
    with pytest.raises(ValueError):
        load_params(tmp_path / "c")
