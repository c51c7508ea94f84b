import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from ddnet import ops
from ddnet.gradcheck import grad_check
from ddnet.ops import BatchNormState, ConvSpec
from ddnet.tensor import Parameter, ShapeError, Tensor, backward, sum_all


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def random_spec(rng):
    c_in, c_out = rng.integers(1, 5, 2)
    k = tuple(rng.integers(1, 4, 2))
    d = tuple(rng.integers(1, 3, 2))
    s = tuple(rng.integers(1, 3, 2))
    p = tuple(rng.integers(0, 3, 2))
    return ConvSpec(int(c_in), int(c_out), k, s, p, d, has_bias=bool(rng.integers(2)))


def test_output_size_formula():
    spec = ConvSpec(1, 1, 3, 2, 1, 2)
    assert spec.output_size(9, 8) == ((9 + 2 - 4 - 1) // 2 + 1, (8 + 2 - 4 - 1) // 2 + 1)
    with pytest.raises(ShapeError):
        ConvSpec(1, 1, 5).output_size(3, 3)


def test_identity_kernel():
    x = T(np.random.default_rng(0).standard_normal((1, 1, 4, 5)))
    out = ops.conv2d(x, T(np.ones((1, 1, 1, 1))), T(np.zeros((1, 1, 1, 1))), ConvSpec(1, 1, 1))
    np.testing.assert_array_equal(out.data, x.data)


def test_all_ones_kernel_counts_taps():
    out = ops.conv2d(T(np.full((1, 1, 5, 5), 2.0)), T(np.ones((1, 1, 3, 3))), None,
                     ConvSpec(1, 1, 3, 1, 1, has_bias=False))
    assert out.data[0, 0, 2, 2] == 18.0 and out.data[0, 0, 0, 0] == 8.0 and out.data[0, 0, 0, 2] == 12.0


def test_conv_example_matches_naive():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    got = ops.conv2d(T(x), T(w), None, ConvSpec(2, 3, 3, has_bias=False)).data
    np.testing.assert_allclose(got, oracles.naive_conv2d(x, w, None, (1, 1), (0, 0), (1, 1)), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_conv_random_specs_match_naive(seed):
    rng = np.random.default_rng(100 + seed)
    spec = random_spec(rng)
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(5, 10)), int(rng.integers(5, 10))
    x = rng.standard_normal((n, spec.in_channels, h, w))
    wt = rng.standard_normal(spec.weight_dims)
    b = rng.standard_normal(spec.out_channels) if spec.has_bias else None
    got = ops.conv2d(T(x), T(wt), T(b.reshape(1, -1, 1, 1)) if b is not None else None, spec).data
    want = oracles.naive_conv2d(x, wt, b, spec.stride, spec.padding, spec.dilation)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 3, 3, 3))), None, ConvSpec(3, 1, 3, has_bias=False))


def test_transposed_identity_and_tiling():
    x = T(np.random.default_rng(2).standard_normal((1, 1, 3, 3)))
    out = ops.transposed_conv2d(x, T(np.ones((1, 1, 1, 1))), ConvSpec(1, 1, 1, has_bias=False))
    np.testing.assert_array_equal(out.data, x.data)
    tiled = ops.transposed_conv2d(T(np.ones((1, 1, 2, 2))), T(np.ones((1, 1, 2, 2))), ConvSpec(1, 1, 2, 2, has_bias=False))
    np.testing.assert_array_equal(tiled.data, np.ones((1, 1, 4, 4)))


def test_transposed_matches_scatter_oracle():
    rng = np.random.default_rng(3)
    spec = ConvSpec(2, 3, 4, 2, 1, has_bias=False)
    x, w = rng.standard_normal((2, 2, 3, 4)), rng.standard_normal(spec.transposed_weight_dims)
    got = ops.transposed_conv2d(T(x), T(w), spec).data
    assert got.shape[2:] == spec.transposed_output_size(3, 4) == ((3 - 1) * 2 - 2 + 3 + 1, (4 - 1) * 2 - 2 + 3 + 1)
    want = oracles.naive_transposed_conv2d(x, w, spec.stride, spec.padding, spec.dilation, got.shape[2:])
    np.testing.assert_allclose(got, want, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_adjointness_random_specs(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng)
    # dims that round-trip: the transposed output of the conv output is (h, w) again
    oh, ow = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    try:
        h, w = spec.transposed_output_size(oh, ow)
    except ShapeError:
        assume(False)
    a = rng.standard_normal((2, spec.in_channels, h, w))
    wt = rng.standard_normal(spec.weight_dims)
    ya = ops.conv2d(T(a), T(wt), None, spec).data
    b = rng.standard_normal(ya.shape)
    # the transposed op takes (in, out, kh, kw); conv weights are (out, in, kh, kw)
    back = ops.transposed_conv2d(T(b), T(wt), spec.swapped()).data
    assert back.shape == a.shape
    lhs, rhs = np.sum(ya * b), np.sum(a * back)
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


def test_pool_examples():
    x = T([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert ops.max_pool(x, 2, 2).item() == 4.0
    assert ops.avg_pool(x, 2, 2).item() == 2.5


def test_max_pool_tie_routes_to_first():
    x = Parameter(np.array([[[[5.0, 5.0], [0.0, 0.0]]]]))
    backward(sum_all(ops.max_pool(x, 2, 2)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_avg_pool_distributes_uniformly():
    x = Parameter(np.arange(16.0).reshape(1, 1, 4, 4))
    backward(sum_all(ops.avg_pool(x, 2, 2)))
    np.testing.assert_array_equal(x.grad, 0.25)


def test_pool_window_too_large():
    with pytest.raises(ShapeError):
        ops.max_pool(T(np.zeros((1, 1, 2, 2))), 3, 1)


@pytest.mark.parametrize("op", [
    lambda x: ops.avg_pool(x, 2, 2),
    lambda x: ops.max_pool(x, 2, 2),
    lambda x: ops.bilinear_upsample(x, 3),
])
def test_constants_are_preserved(op):
    np.testing.assert_allclose(op(T(np.full((1, 2, 6, 6), 1.7))).data, 1.7, rtol=0, atol=1e-15)


def test_batch_norm_train_standardizes():
    rng = np.random.default_rng(4)
    state = BatchNormState(3, dtype=np.float64)
    out = ops.batch_norm(T(rng.normal(5, 3, (4, 3, 5, 5))), state, "train").data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_batch_norm_running_statistics_update():
    state = BatchNormState(1, dtype=np.float64)
    x = np.array([1.0, 2.0, 3.0, 6.0]).reshape(1, 1, 2, 2)
    ops.batch_norm(T(x), state, "train")
    assert state.running_mean[0] == pytest.approx(0.1 * 3.0)
    assert state.running_var[0] == pytest.approx(0.9 + 0.1 * np.var(x, ddof=1))


def test_batch_norm_eval_example():
    state = BatchNormState(1, dtype=np.float64)
    state.gamma.data[:] = 2.0
    state.beta.data[:] = 1.0
    out = ops.batch_norm(T(np.full((1, 1, 1, 1), 3.0)), state, "eval").item()
    assert out == pytest.approx(2 * 3 / np.sqrt(1 + 1e-5) + 1, abs=1e-12)


def test_batch_norm_eval_is_affine():
    rng = np.random.default_rng(5)
    state = BatchNormState(2, dtype=np.float64)
    state.running_mean[:] = rng.standard_normal(2)
    state.running_var[:] = rng.uniform(0.5, 2, 2)
    state.gamma.data = rng.standard_normal((1, 2, 1, 1))
    x = rng.standard_normal((2, 2, 3, 3))
    f = lambda v: ops.batch_norm(T(v), state, "eval").data  # noqa: E731
    np.testing.assert_allclose(f(2.5 * x) - f(0 * x), 2.5 * (f(x) - f(0 * x)), atol=1e-13)


def test_batch_norm_degenerate_batch():
    with pytest.raises(ValueError):
        ops.batch_norm(T(np.ones((1, 1, 1, 1))), BatchNormState(1, dtype=np.float64), "train")


def test_batch_norm_gradcheck():
    rng = np.random.default_rng(6)
    state = BatchNormState(2, dtype=np.float64)
    x = T(rng.standard_normal((2, 2, 3, 3)))
    assert grad_check(lambda x, g, b: ops.batch_norm(x, state, "train"), [x, state.gamma, state.beta]) < 1e-4


def test_upsample_example_and_identity():
    x = T([[[[0.0, 1.0], [2.0, 3.0]]]])
    up = ops.bilinear_upsample(x, 2).data[0, 0]
    assert up.shape == (4, 4) and up[1, 1] == pytest.approx(0.75, abs=1e-15)
    np.testing.assert_array_equal(ops.bilinear_upsample(x, 1).data, x.data)
    with pytest.raises(ValueError):
        ops.bilinear_upsample(x, 0)


def test_upsample_backward_is_transpose():
    rng = np.random.default_rng(7)
    x, g = rng.standard_normal((1, 2, 3, 4)), rng.standard_normal((1, 2, 6, 8))
    p = Parameter(x)
    out = ops.bilinear_upsample(p, 2)
    backward(sum_all(out * T(g)))
    assert np.sum(out.data * g) == pytest.approx(np.sum(x * p.grad), rel=1e-12)
