import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from discmfg.measures import (EmpiricalMeasure, MeasureError, MeasureFlow, geodesic_mix, interpolate_flow,
                              ll_monotonicity_gap, mean, moment, wasserstein)
from oracles import wp_pow_linprog, wp_pow_permutation

floats = st.floats(min_value=-50, max_value=50, allow_nan=False, allow_infinity=False)
clouds = st.lists(floats, min_size=1, max_size=8)


def U(values):
    return EmpiricalMeasure(np.asarray(values, float))


# --- construction ---------------------------------------------------------------

def test_weights_must_sum_to_one():
    with pytest.raises(MeasureError):
        EmpiricalMeasure([0.0, 1.0], [0.5, 0.6])


def test_nonfinite_and_empty_rejected():
    with pytest.raises(MeasureError):
        EmpiricalMeasure([0.0, np.nan])
    with pytest.raises(MeasureError):
        EmpiricalMeasure(np.zeros((0, 1)))


def test_points_are_read_only():
    m = U([1.0, 2.0])
    with pytest.raises(ValueError):
        m.points[0, 0] = 5.0


def test_json_and_csv_round_trip():
    m = EmpiricalMeasure([[0.5, 1.0], [2.0, -1.0]], [0.25, 0.75])
    for back in (EmpiricalMeasure.from_json(m.to_json()), EmpiricalMeasure.from_csv(m.to_csv())):
        np.testing.assert_array_equal(back.points, m.points)
        np.testing.assert_array_equal(back.weights, m.weights)
    assert set(json.loads(m.to_json())) == {"points", "weights"}
    assert m.to_csv().splitlines()[0] == "x0,x1,weight"
    assert "\r\n" in m.to_csv()


# --- wasserstein ----------------------------------------------------------------

def test_identical_clouds_zero():
    m = U([0.3, -1.0, 2.0])
    assert wasserstein(m, m) == 0.0


@pytest.mark.parametrize("p", [1.0, 1.5, 2.0, 3.0])
def test_translation_distance(p):
    assert wasserstein(U([0, 2]), U([1, 3]), p=p) == pytest.approx(1.0, abs=1e-15)


def test_small_instance_matches_lp():
    got = wasserstein(U([0, 1]), U([0, 4]), p=2.0) ** 2
    assert abs(got - wp_pow_permutation([0, 1], [0, 4], 2.0)) < 1e-12
    assert got == pytest.approx(4.5)


def test_unequal_weights_match_linprog():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n, m = rng.integers(1, 7, size=2)
        x, y = rng.normal(size=n), rng.normal(size=m)
        wx, wy = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(m))
        for p in (1.0, 2.0):
            got = wasserstein(EmpiricalMeasure(x, wx), EmpiricalMeasure(y, wy), p=p) ** p
            assert got == pytest.approx(wp_pow_linprog(x, wx, y, wy, p), abs=1e-8)


def test_dimension_mismatch():
    with pytest.raises(MeasureError):
        wasserstein(U([0.0]), EmpiricalMeasure([[0.0, 1.0]]))


def test_sliced_distance_of_translation():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(200, 2))
    shift = np.array([1.0, 0.0])
    d = wasserstein(EmpiricalMeasure(pts), EmpiricalMeasure(pts + shift), p=2.0)
    # sliced W2 of a translation is |shift| times the rms projection cosine
    assert 0.5 < d < 1.0
    assert wasserstein(EmpiricalMeasure(pts), EmpiricalMeasure(pts)) == 0.0


@given(clouds, clouds, clouds)
@settings(max_examples=60, deadline=None)
def test_metric_axioms(a, b, c):
    n = min(len(a), len(b), len(c))
    ma, mb, mc = U(a[:n]), U(b[:n]), U(c[:n])
    dab, dba = wasserstein(ma, mb), wasserstein(mb, ma)
    assert dab >= 0.0
    assert dab == pytest.approx(dba, abs=1e-12)
    assert dab <= wasserstein(ma, mc) + wasserstein(mc, mb) + 1e-9


@given(clouds.flatmap(lambda a: st.tuples(st.just(a), st.lists(floats, min_size=len(a), max_size=len(a)))))
@settings(max_examples=60, deadline=None)
def test_quantile_coupling_is_optimal(pair):
    x, y = pair
    for p in (1.0, 2.0):
        assert abs(wasserstein(U(x), U(y), p=p) ** p - wp_pow_permutation(x, y, p)) < 1e-12 * max(
            1.0, wp_pow_permutation(x, y, p))


# --- moments --------------------------------------------------------------------

def test_point_mass_moments():
    m = U([3.0])
    assert mean(m)[0] == 3.0
    assert moment(m, 2) == 9.0


def test_symmetric_mean_and_first_moment():
    assert mean(U([-1.0, 1.0]))[0] == 0.0
    assert moment(U([1.0, 2.0, 3.0]), 1) == pytest.approx(2.0)


# --- Lasry-Lions gap ------------------------------------------------------------

def test_gap_measure_free_is_zero():
    assert ll_monotonicity_gap(lambda x, m: x**2, U([0, 1]), U([2, 5])) == 0.0


def test_gap_cross_term():
    m1, m2 = U([-1.0, 1.0]), U([0.0, 2.0])
    assert ll_monotonicity_gap(lambda x, m: x * m.bar, m1, m2) == pytest.approx(1.0)


def test_gap_lq_terminal_is_negative():
    m1, m2 = U([-1.0, 1.0]), U([0.0, 2.0])
    assert ll_monotonicity_gap(lambda x, m: (x - m.bar) ** 2, m1, m2) == pytest.approx(-2.0)


def test_gap_stderr_returned():
    rng = np.random.default_rng(1)
    m1, m2 = U(rng.normal(size=500)), U(rng.normal(1.0, size=500))
    gap, se = ll_monotonicity_gap(lambda x, m: x * m.bar, m1, m2, return_stderr=True)
    assert se > 0
    assert gap == pytest.approx((m1.bar - m2.bar) ** 2)


def test_gap_rejects_nonfinite():
    with pytest.raises(MeasureError):
        ll_monotonicity_gap(lambda x, m: np.full_like(x, np.inf), U([0.0]), U([1.0]))


@given(clouds, clouds)
@settings(max_examples=60, deadline=None)
def test_gap_self_zero_and_symmetric(a, b):
    Ufn = lambda x, m: np.sin(x) * m.bar + (x - m.bar) ** 2
    ma, mb = U(a), U(b)
    assert ll_monotonicity_gap(Ufn, ma, ma) == 0.0
    assert ll_monotonicity_gap(Ufn, ma, mb) == pytest.approx(ll_monotonicity_gap(Ufn, mb, ma), abs=1e-9)


# --- flows ----------------------------------------------------------------------

def _flow():
    return MeasureFlow.uniform(1.0, [U([float(i)]) for i in range(5)])


def test_interpolation_at_grid_points():
    f = _flow()
    for i, t in enumerate(f.times):
        assert interpolate_flow(f, t) is f[i]


def test_interpolation_inside_and_at_horizon():
    f = _flow()
    assert interpolate_flow(f, 0.3) is f[1]
    assert interpolate_flow(f, 0.2499) is f[0]
    assert interpolate_flow(f, 1.0) is f[4]
    with pytest.raises(MeasureError):
        interpolate_flow(f, 1.01)


def test_flow_grid_validated():
    with pytest.raises(MeasureError):
        MeasureFlow(np.array([0.0, 0.3, 1.0]), (U([0.0]),) * 3)


def test_geodesic_mix_endpoints_and_midpoint():
    a, b = U([0.0, 2.0]), U([4.0, 6.0])
    assert geodesic_mix(a, b, 0.0) is a
    assert geodesic_mix(a, b, 1.0) is b
    mid = geodesic_mix(a, b, 0.5)
    np.testing.assert_allclose(np.sort(mid.values), [2.0, 4.0])
    assert wasserstein(a, mid) == pytest.approx(0.5 * wasserstein(a, b))
