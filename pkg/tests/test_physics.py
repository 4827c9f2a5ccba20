import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hazeforge.errors import DimensionError, NonFiniteError
from hazeforge.physics import (
    A_RANGE,
    BETA_RANGE,
    HazeParams,
    depth_to_transmission,
    invert_closed_form,
    normalize_depth,
    sample_params,
    synthesize_hazy,
)


def test_zero_depth_full_transmission():
    d = np.array([[0.0, 0.5], [1.0, 0.0]])
    t = depth_to_transmission(d, 1.3)
    assert t[0, 0] == 1.0 and t[1, 1] == 1.0


def test_beta_one_ln2_is_half():
    assert depth_to_transmission(np.array([[np.log(2.0)]]), 1.0)[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_bad_beta_and_depth():
    with pytest.raises(ValueError):
        depth_to_transmission(np.zeros((2, 2)), 0.0)
    with pytest.raises(NonFiniteError):
        depth_to_transmission(np.array([[np.nan]]), 1.0)
    with pytest.raises(ValueError):
        HazeParams(A=np.ones(3), beta=-1.0)


def test_no_haze_identity(rng):
    J = rng.uniform(size=(3, 5, 5))
    I, n = synthesize_hazy(J, np.ones((5, 5)), 0.9)
    assert np.array_equal(I, J) and n == 0


def test_full_haze_is_airlight(rng):
    J = rng.uniform(size=(3, 4, 4))
    A = np.array([0.6, 0.7, 0.8])
    I, _ = synthesize_hazy(J, np.zeros((4, 4)), A)
    np.testing.assert_array_equal(I, np.broadcast_to(A.reshape(3, 1, 1), J.shape))


def test_hand_value():
    I, _ = synthesize_hazy(np.full((3, 1, 1), 0.8), np.full((1, 1), 0.5), 1.0)
    assert np.allclose(I, 0.9, atol=1e-15)


def test_clamp_count():
    J = np.ones((3, 2, 2))
    I, n = synthesize_hazy(J, np.full((2, 2), 0.5), 1.2)
    assert n == 12 and I.max() == 1.0
    raw, n_raw = synthesize_hazy(J, np.full((2, 2), 0.5), 1.2, clamp=False)
    assert n_raw == 0 and raw.max() == pytest.approx(1.1)


def test_spatial_airlight_map(rng):
    J = rng.uniform(size=(3, 4, 4))
    A = rng.uniform(0.5, 1.0, size=(3, 4, 4))
    t = rng.uniform(0.2, 1.0, size=(4, 4))
    I, _ = synthesize_hazy(J, t, A, clamp=False)
    np.testing.assert_allclose(invert_closed_form(I, t, A), J, atol=1e-12)


def test_shape_errors():
    with pytest.raises(DimensionError):
        synthesize_hazy(np.zeros((3, 4, 4)), np.zeros((4, 5)), 1.0)
    with pytest.raises(DimensionError):
        synthesize_hazy(np.zeros((3, 4, 4)), np.zeros((4, 4)), np.ones(2))


def test_inverse_identity_and_haze_only(rng):
    I = rng.uniform(size=(3, 4, 4))
    np.testing.assert_allclose(invert_closed_form(I, np.ones((4, 4)), 0.7), I, atol=1e-15)
    A = 0.8
    J = invert_closed_form(np.full((3, 4, 4), A), rng.uniform(0.01, 1.0, (4, 4)), A)
    np.testing.assert_allclose(J, A, atol=1e-12)


def test_inverse_floor_bounds_amplification():
    I = np.full((3, 1, 1), 0.9)
    J = invert_closed_form(I, np.full((1, 1), 1e-6), 0.5, t_floor=0.05)
    assert np.all(np.isfinite(J)) and np.all((J >= 0) & (J <= 1))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_round_trip_property(seed):
    r = np.random.default_rng(seed)
    J = r.uniform(size=(3, 6, 6))
    d = r.uniform(size=(6, 6))
    p = sample_params(r, per_channel=bool(seed % 2))
    t = depth_to_transmission(d, p.beta)
    I, _ = synthesize_hazy(J, t, p.A, clamp=False)
    ok = (t >= 0.05) & np.all((I >= 0) & (I <= 1), axis=0)
    err = np.abs(invert_closed_form(I, t, p.A) - J)[:, ok]
    assert err.size == 0 or err.max() < 1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_hazy_between_clear_and_airlight(seed):
    r = np.random.default_rng(seed)
    J = r.uniform(size=(3, 5, 5))
    t = r.uniform(size=(5, 5))
    A = r.uniform(0.5, 1.2, size=3).reshape(3, 1, 1)
    I, _ = synthesize_hazy(J, t, A[:, 0, 0], clamp=False)
    assert np.all(I >= np.minimum(J, A) - 1e-15)
    assert np.all(I <= np.maximum(J, A) + 1e-15)


@settings(max_examples=30, deadline=None)
@given(b1=st.floats(0.01, 5.0), b2=st.floats(0.01, 5.0))
def test_transmission_monotone_in_beta(b1, b2):
    if b1 == b2:
        return
    lo, hi = sorted((b1, b2))
    d = np.linspace(0.01, 1.0, 17).reshape(1, -1)
    assert np.all(depth_to_transmission(d, hi) < depth_to_transmission(d, lo))


def test_sampled_params_in_range():
    r = np.random.default_rng(0)
    draws = [sample_params(r, per_channel=True) for _ in range(10_000)]
    A = np.stack([p.A for p in draws])
    b = np.array([p.beta for p in draws])
    assert A_RANGE[0] <= A.min() and A.max() <= A_RANGE[1]
    assert BETA_RANGE[0] <= b.min() and b.max() <= BETA_RANGE[1]


def test_gray_airlight_default(rng):
    p = sample_params(rng)
    assert p.A[0] == p.A[1] == p.A[2]


def test_normalize_depth():
    d = normalize_depth(np.array([[2.0, 4.0], [0.0, 8.0]]))
    assert d.max() == 1.0 and d.min() == 0.0
    assert np.array_equal(normalize_depth(np.zeros((2, 2))), np.zeros((2, 2)))
