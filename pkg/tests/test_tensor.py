import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orient_learn import tensor as T
from orient_learn.errors import IngestionError, ShapeError, TrainingError

from oracles import conv2d_loops, fc_loops, maxpool_loops


def rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300))


def test_conv_matches_loops(rng):
    x = rng.standard_normal((2, 3, 8, 7))
    k = rng.standard_normal((4, 3, 3, 2))
    b = rng.standard_normal(4)
    assert rel(T.conv2d(x, k, b), conv2d_loops(x, k, b)) < 1e-12


def test_conv_single_channel_by_hand():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    k = np.array([[[[1.0, 0.0], [0.0, -1.0]]]])
    out = T.conv2d(x, k, np.array([0.5]))
    # x[i, j] - x[i+1, j+1] = -4 everywhere
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), -3.5))


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeError):
        T.conv2d(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        T.conv2d(rng.standard_normal((1, 1, 2, 2)), rng.standard_normal((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        T.conv2d(rng.standard_normal((1, 5, 5)), rng.standard_normal((1, 1, 3, 3)), np.zeros(1))


def test_conv_backward_finite_difference(rng):
    x = rng.standard_normal((2, 2, 6, 6))
    ps = T.ParamSet({"x": x, "k": rng.standard_normal((3, 2, 3, 3)), "b": rng.standard_normal(3)})
    g = rng.standard_normal((2, 3, 4, 4))
    gx, gk, gb = T.conv2d_backward(g, ps["x"], ps["k"])
    f = lambda p: float(np.sum(g * T.conv2d(p["x"], p["k"], p["b"])))
    assert T.finite_difference_check(f, ps, {"x": gx, "k": gk, "b": gb}) < 1e-6


def test_maxpool_matches_loops_and_routes(rng):
    x = rng.standard_normal((2, 3, 6, 4))
    out, index = T.maxpool2x2(x)
    assert rel(out, maxpool_loops(x)) < 1e-12
    g = rng.standard_normal(out.shape)
    back = T.maxpool2x2_backward(g, index)
    # every window passes its gradient to exactly its maximum
    assert np.count_nonzero(back) == out.size
    np.testing.assert_allclose(back.reshape(2, 3, 3, 2, 2, 2).sum(axis=(3, 5)), g)


def test_maxpool_tie_goes_to_first():
    x = np.ones((1, 1, 2, 2))
    out, index = T.maxpool2x2(x)
    assert index[0, 0, 0, 0] == 0
    back = T.maxpool2x2_backward(np.ones((1, 1, 1, 1)), index)
    np.testing.assert_array_equal(back[0, 0], [[1, 0], [0, 0]])


def test_maxpool_odd_shape():
    with pytest.raises(ShapeError):
        T.maxpool2x2(np.zeros((1, 1, 3, 4)))


def test_fc_matches_loops(rng):
    x = rng.standard_normal((4, 9))
    w = rng.standard_normal((5, 9))
    b = rng.standard_normal(5)
    assert rel(T.fully_connected(x, w, b), fc_loops(x, w, b)) < 1e-12
    with pytest.raises(ShapeError):
        T.fully_connected(x, w[:, :8], b)


def test_relu_subgradient_at_zero():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(T.relu(x), [0, 0, 2])
    np.testing.assert_array_equal(T.relu_backward(np.ones(3), x), [0, 0, 1])


def test_tanh_backward(rng):
    x = rng.standard_normal(10)
    out = T.tanh(x)
    np.testing.assert_allclose(T.tanh_backward(np.ones(10), out), 1 / np.cosh(x) ** 2)


def test_prelu_forward_and_alpha_gradient(rng):
    x = np.array([[-2.0, 3.0], [1.0, -0.5]])
    alpha = np.array([0.1, 0.25])
    np.testing.assert_allclose(T.prelu(x, alpha), [[-0.2, 3.0], [1.0, -0.125]])
    gx, ga = T.prelu_backward(np.ones_like(x), x, alpha)
    np.testing.assert_allclose(gx, [[0.1, 1.0], [1.0, 0.25]])
    np.testing.assert_allclose(ga, [-2.0, -0.5])


def test_dropout_modes(rng):
    x = np.ones((200, 50))
    out, mask = T.dropout(x, 0.3, train=False)
    assert mask is None and out is not None
    np.testing.assert_array_equal(out, x)
    out, mask = T.dropout(x, 0.3, train=True, rng=rng)
    kept = out[out > 0]
    np.testing.assert_allclose(kept, 1 / 0.7)
    assert abs((out == 0).mean() - 0.3) < 0.02
    np.testing.assert_array_equal(T.dropout_backward(np.ones_like(x), mask), mask)
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, train=True, rng=rng)


def test_glorot_bounds(rng):
    w = T.glorot_uniform(rng, (50, 40), 40, 50)
    limit = math.sqrt(6 / 90)
    assert np.all(np.abs(w) <= limit) and np.abs(w).max() > 0.9 * limit


def test_paramset_shape_and_names():
    ps = T.ParamSet({"a": np.zeros(3)})
    with pytest.raises(KeyError):
        ps.add("a", np.zeros(2))
    with pytest.raises(ShapeError):
        ps["a"] = np.zeros(4)
    with pytest.raises(KeyError):
        ps["b"] = np.zeros(3)
    ps["a"] = [1, 2, 3]
    c = ps.copy()
    c["a"] = [0, 0, 0]
    np.testing.assert_array_equal(ps["a"], [1, 2, 3])
    assert ps.size() == 3 and list(ps.zeros_like()["a"]) == [0, 0, 0]


def test_adam_first_step_by_hand():
    ps = T.ParamSet({"w": np.array([1.0, -2.0])})
    g = {"w": np.array([0.5, -4.0])}
    state = T.AdamState.for_params(ps, lr=0.1)
    T.adam_step(ps, g, state)
    # bias-corrected first step moves each coordinate by lr * sign(g) (up to eps)
    np.testing.assert_allclose(ps["w"], [0.9, -1.9], atol=1e-7)
    T.adam_step(ps, g, state)
    np.testing.assert_allclose(ps["w"], [0.8, -1.8], atol=1e-7)
    assert state.step == 2


def test_adam_second_step_by_hand():
    ps = T.ParamSet({"w": np.array([0.0])})
    state = T.AdamState.for_params(ps, lr=1.0, eps=0.0)
    T.adam_step(ps, {"w": np.array([1.0])}, state)
    T.adam_step(ps, {"w": np.array([3.0])}, state)
    m = (0.9 * 0.1 * 1 + 0.1 * 3) / (1 - 0.9**2)
    v = (0.999 * 0.001 * 1 + 0.001 * 9) / (1 - 0.999**2)
    np.testing.assert_allclose(ps["w"], [-1.0 - m / math.sqrt(v)], rtol=1e-12)


def test_adam_rejects_nan():
    ps = T.ParamSet({"w": np.zeros(2)})
    with pytest.raises(TrainingError):
        T.adam_step(ps, {"w": np.array([np.nan, 0])}, T.AdamState.for_params(ps))
    with pytest.raises(ValueError):
        T.AdamState(lr=0)


def test_finite_difference_detects_wrong_gradient(rng):
    ps = T.ParamSet({"x": rng.standard_normal(5)})
    f = lambda p: float(np.sum(p["x"] ** 3))
    assert T.finite_difference_check(f, ps, {"x": 3 * ps["x"] ** 2}) < 1e-6
    assert T.finite_difference_check(f, ps, {"x": 2 * ps["x"] ** 2}) > 0.1


def test_checkpoint_round_trip_and_truncation(rng, tmp_path):
    ps = T.ParamSet({"a": rng.standard_normal((2, 3)), "s": np.array(4.5), "b": rng.standard_normal(5)})
    buf = T.encode_checkpoint(ps, b"meta!")
    back, meta = T.decode_checkpoint(buf)
    assert meta == b"meta!" and list(back) == ["a", "s", "b"]
    for k in ps:
        assert back[k].tobytes() == ps[k].tobytes()
    T.save_checkpoint(tmp_path / "c.bin", ps, b"")
    assert (tmp_path / "c.bin").read_bytes() == T.encode_checkpoint(ps)
    with pytest.raises(IngestionError, match="record 2"):
        T.decode_checkpoint(buf[:-3])
    with pytest.raises(IngestionError, match="offset 0"):
        T.decode_checkpoint(b"XXXX" + buf[4:])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 6), st.integers(1, 3))
def test_conv_property_random_shapes(n, c, side, k):
    k = min(k, side)
    r = np.random.default_rng(n * 100 + c * 10 + side)
    x = r.standard_normal((n, c, side, side))
    w = r.standard_normal((2, c, k, k))
    b = r.standard_normal(2)
    assert rel(T.conv2d(x, w, b), conv2d_loops(x, w, b)) < 1e-12
