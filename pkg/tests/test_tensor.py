import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hazeforge import tensor as T
from hazeforge.errors import BackwardError, DegenerateInputError, DimensionError, NonFiniteError
from hazeforge.tensor import RunningStats, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -----------------------------------------------------------------------------
# convolution
# -----------------------------------------------------------------------------
def test_conv_output_size_256_to_128():
    x = Tensor(np.zeros((1, 3, 256, 256)))
    w = Tensor(np.zeros((5, 3, 4, 4)))
    assert T.conv2d(x, w, None, 2, 1).shape == (1, 5, 128, 128)


def test_conv_zero_weights_zero_output(rng):
    x = Tensor(rng.normal(size=(2, 3, 8, 8)))
    out = T.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)), 1, 1)
    assert np.all(out.data == 0.0)


def test_conv_ones_gives_nine():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def _loop_conv(x, w, b, stride, pad):
    B, C, H, W = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (H + 2 * pad - k) // stride + 1
    wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, co, ho, wo))
    for n in range(B):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 1), (2, 0)])
def test_conv_matches_loop_oracle(rng, stride, pad):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, _loop_conv(x, w, b, stride, pad), atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 4, 3, 3))))


def test_tconv_output_size_128_to_256():
    x = Tensor(np.zeros((1, 2, 128, 128)))
    w = Tensor(np.zeros((2, 6, 4, 4)))
    assert T.transpose_conv2d(x, w, None, 2, 1).shape == (1, 6, 256, 256)


def test_tconv_zero_weights(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)))
    assert np.all(T.transpose_conv2d(x, Tensor(np.zeros((2, 3, 4, 4))), None, 2, 1).data == 0)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    cin=st.integers(1, 3),
    cout=st.integers(1, 3),
    k=st.sampled_from([3, 4]),
    stride=st.integers(1, 2),
    pad=st.integers(0, 1),
)
def test_tconv_is_conv_adjoint(seed, cin, cout, k, stride, pad):
    r = np.random.default_rng(seed)
    # pick an input size the convolution tiles exactly so the two shapes line up
    ho = 3
    H = (ho - 1) * stride + k - 2 * pad
    x = r.normal(size=(2, cin, H, H))
    w = r.normal(size=(cout, cin, k, k))
    cx = T.conv2d(Tensor(x), Tensor(w), None, stride, pad).data
    y = r.normal(size=cx.shape)
    ty = T.transpose_conv2d(Tensor(y), Tensor(w), None, stride, pad).data
    assert ty.shape == x.shape
    lhs, rhs = np.sum(cx * y), np.sum(x * ty)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_adjoint_5x5(rng):
    x = rng.normal(size=(1, 1, 5, 5))
    w = rng.normal(size=(1, 1, 3, 3))
    cx = T.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    y = rng.normal(size=(1, 1, 5, 5))
    ty = T.transpose_conv2d(Tensor(y), Tensor(w), None, 1, 1).data
    assert abs(np.sum(cx * y) - np.sum(x * ty)) < 1e-10


# -----------------------------------------------------------------------------
# batch norm
# -----------------------------------------------------------------------------
def test_bn_constant_channel_is_beta():
    x = Tensor(np.full((2, 1, 3, 3), 4.2))
    out = T.batch_norm(x, Tensor(np.array([1.7])), Tensor(np.array([0.3])), None, "train")
    assert np.all(out.data == 0.3)


def test_bn_normalizes(rng):
    x = Tensor(rng.normal(3.0, 2.0, size=(8, 2, 16, 16)))
    out = T.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), None, "train").data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-6)
    # eps damping keeps the variance slightly below one
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1.0) < 1e-5 / 4.0 + 1e-6)


def test_bn_eval_identity(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    rs = RunningStats(3)
    rs.mean[:] = 0.0
    rs.var[:] = 1.0 - T.BN_EPS
    out = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rs, "eval").data
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_bn_running_stats_update(rng):
    x = rng.normal(2.0, 3.0, size=(4, 1, 5, 5))
    rs = RunningStats(1)
    T.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), rs, "train")
    n = x.size
    assert rs.mean[0] == pytest.approx(0.1 * x.mean())
    assert rs.var[0] == pytest.approx(0.9 + 0.1 * x.var() * n / (n - 1))


def test_bn_empty_channel():
    with pytest.raises(DegenerateInputError):
        T.batch_norm(Tensor(np.zeros((0, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


# -----------------------------------------------------------------------------
# activations, structure
# -----------------------------------------------------------------------------
def test_prelu_values():
    x = Tensor(np.array([2.0, -2.0, 0.0]).reshape(1, 3, 1, 1))
    out = T.prelu(x, Tensor(np.full(3, 0.25))).data.ravel()
    assert out.tolist() == [2.0, -0.5, 0.0]


def test_activation_symmetry_points():
    z = Tensor(np.zeros(3))
    assert np.all(T.tanh_act(z).data == 0.0)
    assert np.all(T.sigmoid_act(z).data == 0.5)


def test_activation_saturation_finite():
    big = leaf([1e3, -1e3])
    th, sg = T.tanh_act(big), T.sigmoid_act(big)
    assert th.data[0] == pytest.approx(1.0) and th.data[1] == pytest.approx(-1.0)
    assert sg.data[1] == pytest.approx(0.0, abs=1e-300) and sg.data[0] == pytest.approx(1.0)
    T.backward(T.tsum(th) + T.tsum(sg))
    assert np.all(np.isfinite(big.grad))


def test_concat_shapes_and_slices(rng):
    a, b = rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(1, 3, 4, 4))
    c = T.concat_channels(Tensor(a), Tensor(b))
    assert c.shape == (1, 4, 4, 4)
    assert np.array_equal(c.data[:, :1], a) and np.array_equal(c.data[:, 1:], b)


def test_concat_grad_ones(rng):
    a, b = leaf(rng.normal(size=(1, 1, 4, 4))), leaf(rng.normal(size=(1, 3, 4, 4)))
    T.backward(T.tsum(T.concat_channels(a, b)))
    assert np.all(a.grad == 1.0) and np.all(b.grad == 1.0)


def test_concat_spatial_mismatch():
    with pytest.raises(DimensionError):
        T.concat_channels(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 5))))


def test_skip_add(rng):
    a = rng.normal(size=(2, 2))
    b = rng.normal(size=(2, 2))
    assert np.array_equal(T.skip_add(Tensor(a), Tensor(np.zeros((2, 2)))).data, a)
    got = T.skip_add(Tensor(a), Tensor(b)).data
    for i in range(2):
        for j in range(2):
            assert got[i, j] == a[i, j] + b[i, j]
    ta, tb = leaf(a), leaf(b)
    T.backward(T.tsum(T.skip_add(ta, tb)))
    assert np.all(ta.grad == 1.0) and np.all(tb.grad == 1.0)
    with pytest.raises(DimensionError):
        T.skip_add(Tensor(a), Tensor(np.zeros((2, 3))))


# -----------------------------------------------------------------------------
# backward semantics
# -----------------------------------------------------------------------------
def test_backward_sum_gives_ones(rng):
    x = leaf(rng.normal(size=(3, 4)))
    T.backward(x.sum())
    assert np.all(x.grad == 1.0)


def test_backward_square_at_three():
    x = leaf([3.0])
    T.backward(T.tsum(T.square(x)))
    assert x.grad[0] == 6.0


def test_backward_twice_raises():
    x = leaf([1.0, 2.0])
    loss = T.tsum(T.square(x))
    T.backward(loss)
    with pytest.raises(BackwardError):
        T.backward(loss)


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(BackwardError):
        T.backward(T.square(x))


def test_leaf_grads_accumulate():
    x = leaf([2.0])
    T.backward(T.tsum(T.square(x)))
    T.backward(T.tsum(T.square(x)))
    assert x.grad[0] == 8.0
    x.zero_grad()
    assert x.grad[0] == 0.0


def test_shared_subexpression_gradient():
    x = leaf([1.5])
    y = x * x
    T.backward(T.tsum(y + y))
    assert x.grad[0] == pytest.approx(6.0)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    with pytest.raises(BackwardError):
        T.backward(T.tsum(y))


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        T.log(Tensor(np.array([0.0])))


def test_determinism(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 4, 4))

    def run():
        tx, tw = leaf(x), leaf(w)
        out = T.conv2d(tx, tw, None, 2, 1)
        T.backward(T.tsum(T.square(out)))
        return out.data, tx.grad, tw.grad

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


# -----------------------------------------------------------------------------
# gradcheck
# -----------------------------------------------------------------------------
def test_gradcheck_conv_1x2x5x5(rng):
    x = leaf(rng.normal(size=(1, 2, 5, 5)))
    w = leaf(rng.normal(size=(3, 2, 3, 3)))
    R = rng.normal(size=(1, 3, 3, 3))
    rep = T.gradcheck(lambda: T.tsum(T.mul(T.conv2d(x, w), R)), {"x": x, "w": w})
    assert max(rep.values()) < 1e-4


def test_gradcheck_bn_train(rng):
    x = leaf(rng.normal(size=(3, 2, 4, 4)))
    g, b = leaf(rng.uniform(0.5, 1.5, 2)), leaf(rng.normal(size=2))
    R = rng.normal(size=x.shape)
    rep = T.gradcheck(lambda: T.tsum(T.mul(T.batch_norm(x, g, b), R)), {"x": x, "g": g, "b": b})
    assert max(rep.values()) < 1e-4


def test_gradcheck_detects_wrong_gradient(rng):
    x = leaf(rng.normal(size=(4,)))

    def wrong_square(a):
        return Tensor._from_op(a.data**2, (a,), lambda g: (g * a.data,), "bad")  # missing factor 2

    rep = T.gradcheck(lambda: T.tsum(wrong_square(x)), {"x": x})
    assert rep["x"] > 0.3


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), B=st.integers(1, 2), C=st.integers(1, 3), H=st.integers(4, 7), W=st.integers(4, 7))
def test_gradcheck_random_conv_shapes(seed, B, C, H, W):
    r = np.random.default_rng(seed)
    x = leaf(r.normal(size=(B, C, H, W)))
    w = leaf(r.normal(size=(2, C, 3, 3)))
    b = leaf(r.normal(size=2))
    out_shape = T.conv2d(x, w, b, 1, 1).shape
    R = r.normal(size=out_shape)
    rep = T.gradcheck(lambda: T.tsum(T.mul(T.conv2d(x, w, b, 1, 1), R)), {"x": x, "w": w, "b": b}, seed=seed)
    assert max(rep.values()) < 1e-4
