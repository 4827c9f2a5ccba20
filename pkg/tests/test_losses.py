import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hazeforge import losses as L
from hazeforge.errors import ConfigError, DegenerateInputError, DimensionError
from hazeforge.tensor import Tensor


def test_euclidean_example():
    pred = Tensor(np.full((1, 1, 2, 2), 1.0))
    assert L.euclidean_loss(pred, np.zeros((1, 1, 2, 2))).item() == 4.0
    assert L.euclidean_loss(pred, pred.data).item() == 0.0


def test_euclidean_batch_normalization():
    pred = Tensor(np.ones((2, 1, 2, 2)))
    assert L.euclidean_loss(pred, np.zeros((2, 1, 2, 2))).item() == 4.0
    assert L.euclidean_loss(pred, np.zeros((2, 1, 2, 2)), normalize="sum").item() == 8.0
    with pytest.raises(DimensionError):
        L.euclidean_loss(pred, np.zeros((2, 1, 2, 3)))


def test_adversarial_values():
    half = Tensor(np.full((2, 1, 3, 3), 0.5))
    assert L.adversarial_g_loss(half).item() == pytest.approx(math.log(2))
    assert L.adversarial_g_loss(Tensor(np.ones((1, 1, 2, 2)))).item() == pytest.approx(0.0, abs=1e-7)
    d = L.adversarial_d_loss(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 2))))
    assert d.item() == pytest.approx(0.0, abs=1e-7)
    assert L.adversarial_d_loss(half, half).item() == pytest.approx(2 * math.log(2))


def test_gradient_ops_example():
    hx, hy = L.gradient_ops(Tensor(np.array([[[[1.0, 3.0, 6.0], [1.0, 3.0, 6.0]]]])))
    np.testing.assert_array_equal(hx.data[0, 0, 0], [2.0, 3.0])
    np.testing.assert_array_equal(hy.data, np.zeros((1, 1, 1, 3)))


def test_gradient_ops_constant_and_ramp():
    hx, hy = L.gradient_ops(Tensor(np.full((1, 1, 5, 5), 0.7)))
    assert not hx.data.any() and not hy.data.any()
    ramp = np.tile(np.arange(6.0) * 0.25, (1, 1, 4, 1))
    hx, hy = L.gradient_ops(Tensor(ramp))
    np.testing.assert_allclose(hx.data, 0.25)
    assert not hy.data.any()
    with pytest.raises(DegenerateInputError):
        L.gradient_ops(Tensor(np.zeros((1, 1, 1, 5))))


@settings(max_examples=25, deadline=None)
@given(
    t=hnp.arrays(np.float64, (1, 1, 4, 5), elements=st.floats(0, 1)),
    c=st.floats(-1, 1),
)
def test_gradient_loss_offset_invariant(t, c):
    assert L.gradient_loss(Tensor(t + c), t).item() == pytest.approx(0.0, abs=1e-20)


def test_perceptual_zero_and_identity(rng):
    x = rng.uniform(size=(2, 3, 8, 8))
    y = rng.uniform(size=(2, 3, 8, 8))
    feat = L.FeatureNet(seed=0)
    assert L.perceptual_loss(Tensor(x), x, feat).item() == 0.0
    ident = L.FeatureNet(identity=True)
    expect = ((x - y) ** 2).sum() / x.size
    assert L.perceptual_loss(Tensor(x), y, ident).item() == pytest.approx(expect, rel=1e-12)
    with pytest.raises(DimensionError):
        feat(Tensor(np.zeros((1, 1, 8, 8))))


def test_feature_net_frozen_and_seeded(rng):
    a, b = L.FeatureNet(seed=7), L.FeatureNet(seed=7)
    x = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    np.testing.assert_array_equal(a(x).data, b(x).data)
    assert a(x).shape == (1, 64, 2, 2)


def _fixture(rng):
    pred = Tensor(rng.uniform(size=(2, 1, 6, 6)), requires_grad=True)
    target = rng.uniform(size=(2, 1, 6, 6))
    d_out = Tensor(rng.uniform(0.1, 0.9, size=(2, 1, 2, 2)))
    return pred, target, d_out


def test_transmission_toggles_add_weighted_terms(rng):
    pred, target, d_out = _fixture(rng)
    w = L.LossWeights(lambda_a=0.3, lambda_G=2.0)
    e = L.euclidean_loss(pred, target).item()
    a = L.adversarial_g_loss(d_out).item()
    g = L.gradient_loss(pred, target).item()
    for adv in (False, True):
        for grad in (False, True):
            ww = L.LossWeights(lambda_a=0.3, lambda_G=2.0, enable_adv=adv, enable_grad=grad)
            total = L.transmission_loss(pred, target, d_out, ww).item()
            assert total == pytest.approx(e + adv * w.lambda_a * a + grad * w.lambda_G * g, rel=1e-12)
            assert total >= 0


def test_dehazing_toggle_adds_weighted_term(rng):
    J = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    clear = rng.uniform(size=(1, 3, 8, 8))
    feat = L.FeatureNet(seed=1)
    off = L.dehazing_loss(J, clear, feat, L.LossWeights(enable_perc=False)).item()
    on = L.dehazing_loss(J, clear, feat, L.LossWeights(lambda_p=1.5)).item()
    p = L.perceptual_loss(J, clear, feat).item()
    assert on == pytest.approx(off + 1.5 * p, rel=1e-12)
    assert off == pytest.approx(L.euclidean_loss(J, clear).item())


def test_presets():
    assert set(L.PRESETS) == set(L.TRANSMISSION_PRESETS) | set(L.DEHAZING_PRESETS)
    assert not L.preset("T-L2").enable_grad and not L.preset("T-L2").enable_adv
    assert L.preset("T-L2-G-GAN").enable_adv and L.preset("T-L2-G-GAN").enable_grad
    assert not L.preset("I-L2-noT").enable_transmission_branch
    assert L.preset("I-L2-Per-T").enable_perc and not L.preset("I-L2-T").enable_perc
    assert L.preset("T-L2", lambda_G=4.0).lambda_G == 4.0
    with pytest.raises(ConfigError):
        L.preset("nope")
    with pytest.raises(ConfigError):
        L.LossWeights(lambda_a=-1)


def test_missing_inputs_rejected(rng):
    pred, target, _ = _fixture(rng)
    with pytest.raises(ConfigError):
        L.transmission_loss(pred, target, None, L.LossWeights())
    with pytest.raises(ConfigError):
        L.dehazing_loss(Tensor(np.zeros((1, 3, 4, 4))), np.zeros((1, 3, 4, 4)), None, L.LossWeights())
