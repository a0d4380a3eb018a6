import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from discmfg.analytic import (LqParams, lq_bsde_coeffs, lq_flow_moments, lq_g_recursion, lq_policy_coeffs,
                              lq_single_period, lq_two_period, tanh_uniqueness_margin)

pos = st.floats(min_value=0.05, max_value=20.0)


def test_single_period_unit_case():
    out = lq_single_period(LqParams(c=1.0, noise_var=0.25))
    assert out["policy_coeff"] == 0.5
    assert out["equilibrium_mean"] == 0.0
    assert out["equilibrium_var"] == pytest.approx(0.5)


def test_two_period_coefficients():
    out = lq_two_period(LqParams(c=1.0, c_L=1.0, noise_var=0.25))
    assert out["g1_curvature"] == pytest.approx(1.5)
    assert out["stage1_coeff"] == pytest.approx(0.6)
    assert out["stage2_coeff"] == pytest.approx(0.5)
    # g_1(1, delta_0) = 1.5 + 0.25
    assert out["g1_curvature"] * 1.0 + out["g1_offset"] == pytest.approx(1.75)


def test_recursion_matches_two_period_at_unit_step():
    prm = LqParams(c=2.0, c_L=0.7, noise_var=0.3)
    q = lq_g_recursion(prm, 2)
    two = lq_two_period(prm)
    assert q[1, 0] == pytest.approx(two["g1_curvature"])
    assert q[1, 1] == pytest.approx(two["g1_offset"])
    np.testing.assert_allclose(lq_policy_coeffs(prm, 2), [two["stage1_coeff"], two["stage2_coeff"]])


def test_single_period_consistent_with_recursion():
    prm = LqParams(c=0.7, delta=0.5)
    assert lq_policy_coeffs(prm, 1)[0] == pytest.approx(lq_single_period(prm)["policy_coeff"])
    assert lq_flow_moments(prm, 1)[1, 1] == pytest.approx(lq_single_period(prm)["equilibrium_var"])


def test_recursions_against_riccati():
    # with c_L = 0 the continuous value curvature solves p' = p^2 / c, p(T) = 1;
    # 1/q gains exactly delta/c per step, so the value recursion is exact
    c, T = 1.0, 1.0
    exact = 1.0 / (1.0 + T / c)
    errs = []
    for k in (8, 16, 32, 64):
        prm = LqParams(c=c, c_L=0.0, delta=T / k)
        assert lq_g_recursion(prm, k)[0, 0] == pytest.approx(exact, abs=1e-12)
        errs.append(abs(lq_bsde_coeffs(prm, k)[0] - exact))
    errs = np.array(errs)
    # the explicit backward scheme is first order in delta
    np.testing.assert_allclose(errs[:-1] / errs[1:], 2.0, rtol=0.05)


def test_bsde_coeffs_unit_case():
    p = lq_bsde_coeffs(LqParams(c=1.0, c_L=1.0), 3)
    np.testing.assert_allclose(p, 1.0)


def test_flow_mean_constant():
    m = lq_flow_moments(LqParams(xi_mean=0.3, xi_var=2.0, delta=0.25, noise_var=0.0625), 4)
    np.testing.assert_allclose(m[:, 0], 0.3)
    assert np.all(m[:, 1] > 0)


@given(pos, pos, st.floats(0.0, 2.0), st.integers(1, 12), st.floats(0.01, 2.0))
@settings(max_examples=80, deadline=None)
def test_recursion_stays_positive_and_stable(c, cl, s2, k, delta):
    prm = LqParams(c=c, c_L=cl, noise_var=s2, delta=delta)
    q = lq_g_recursion(prm, k)
    assert np.all(q[:, 0] > 0)
    assert np.all(np.diff(q[:, 1]) <= 0)
    kap = lq_policy_coeffs(prm, k)
    # the closed loop keeps a positive fraction of the deviation from the mean
    assert np.all(kap * delta < 1.0) and np.all(kap > 0)


def test_tanh_margin():
    assert tanh_uniqueness_margin(3.0, 1.0) == 1.0
    assert tanh_uniqueness_margin(1.0, 1.0) == -1.0
    with pytest.raises(ValueError):
        tanh_uniqueness_margin(0.0, 1.0)


def test_params_validated():
    with pytest.raises(ValueError):
        LqParams(c=0.0)
    with pytest.raises(ValueError):
        LqParams(delta=0.0)
    with pytest.raises(ValueError):
        lq_g_recursion(LqParams(), 0)
