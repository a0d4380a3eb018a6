import numpy as np
import pytest

from discmfg.families import build_problem, lq_problem, polynomial_problem, tanh_problem
from discmfg.measures import EmpiricalMeasure, MeasureFlow
from discmfg.model import (FeedbackPolicy, InitialLaw, InterpolatedMap, MfgProblem, NoiseSpec, PathBundle,
                           SimulationError, binomial_tree_paths, sample_paths, simulate_state, total_cost,
                           path_costs, trajectories_csv)


def _flow_for(paths, k, T=1.0):
    m = EmpiricalMeasure(paths.initial_states)
    return MeasureFlow.uniform(T, [m] * (k + 1))


def _problem(**kw):
    base = dict(dim=1, running_cost_L0=lambda x, a: np.zeros_like(x), terminal_G=lambda x, m: np.zeros_like(x),
                action_low=-1.0, action_high=1.0, sigma=1.0, horizon_T=1.0, periods_k=1)
    base.update(kw)
    return MfgProblem(**base)


def test_zero_noise_increments_exactly_zero():
    p = lq_problem(k=4, noise="zero")
    paths = sample_paths(p, 1000, seed=3)
    assert np.all(paths.noise_increments == 0.0)


def test_gaussian_increment_variance():
    n, delta = 100_000, 0.25
    p = lq_problem(T=1.0, k=4)
    paths = sample_paths(p, n, seed=11)
    var = paths.noise_increments[:, 0, 0].var()
    assert abs(var - delta) < 3 * np.sqrt(2.0 / n) * delta


def test_rademacher_support():
    p = lq_problem(T=1.0, k=4, noise="rademacher_scaled")
    paths = sample_paths(p, 5000, seed=2)
    assert set(np.unique(paths.noise_increments)) == {-0.5, 0.5}


def test_same_seed_bit_identical_and_prefix_stable():
    p = lq_problem(k=3)
    a, b = sample_paths(p, 10_000, seed=5), sample_paths(p, 10_000, seed=5)
    assert a.noise_increments.tobytes() == b.noise_increments.tobytes()
    assert a.initial_states.tobytes() == b.initial_states.tobytes()
    # path j depends only on (seed, j)
    small = sample_paths(p, 5000, seed=5)
    assert np.array_equal(small.noise_increments, a.noise_increments[:5000])
    other = sample_paths(p, 10_000, seed=6)
    assert not np.array_equal(other.noise_increments, a.noise_increments)


def test_increments_uncorrelated_with_past():
    p = lq_problem(T=4.0, k=4)
    n = 100_000
    paths = sample_paths(p, n, seed=1)
    xi = paths.xi()
    for i in range(1, 4):
        past = xi + paths.noise_increments[:, :i, 0].sum(axis=1)
        nxt = paths.increment(i)
        for f in (np.sin(past), past, past**2, np.abs(past), np.tanh(3 * past)):
            cov = np.mean((f - f.mean()) * nxt)
            se = np.std((f - f.mean()) * nxt) / np.sqrt(n)
            assert abs(cov) < 4 * se


def test_coarsen_sums_increments():
    p = lq_problem(k=8)
    paths = sample_paths(p, 100, seed=0)
    c = paths.coarsen(2)
    np.testing.assert_allclose(c.noise_increments[:, 0, 0], paths.noise_increments[:, :4, 0].sum(axis=1))
    assert c.delta == pytest.approx(4 * paths.delta)
    with pytest.raises(ValueError):
        paths.coarsen(3)


def test_binomial_tree_enumerates_all_paths():
    tree = binomial_tree_paths(3, 0.25)
    assert tree.n_paths == 8
    assert len({tuple(r) for r in tree.noise_increments[:, :, 0]}) == 8


def test_uncontrolled_is_noise_sum():
    p = lq_problem(k=5, T=1.0)
    paths = sample_paths(p, 500, seed=7)
    traj = simulate_state(p, FeedbackPolicy.constant(p, 0.0), _flow_for(paths, 5), paths)
    expected = paths.xi()[:, None] + 0.5 * np.concatenate(
        [np.zeros((500, 1)), np.cumsum(paths.noise_increments[:, :, 0], axis=1)], axis=1)
    np.testing.assert_allclose(traj[:, :, 0], expected, atol=1e-14)


def test_euler_recursion_unit_drift():
    p = _problem(drift_b0=lambda x, m: np.ones_like(x), horizon_T=2.0, periods_k=2, noise=NoiseSpec("zero"),
                 initial=InitialLaw("point", mean=0.0))
    paths = sample_paths(p, 3, seed=0)
    traj = simulate_state(p, FeedbackPolicy.constant(p, 0.0), _flow_for(paths, 2, 2.0), paths)
    np.testing.assert_array_equal(traj[0, :, 0], [0.0, 1.0, 2.0])


def test_lq_closed_form_path_by_path():
    c = 1.0
    p = lq_problem(c=c, sigma=0.5, k=1)
    paths = sample_paths(p, 2000, seed=4)
    xi = paths.xi()
    mbar = float(xi.mean())
    kappa = 1.0 / (1.0 + c)
    policy = FeedbackPolicy([InterpolatedMap(np.array([-15.0, 15.0]), kappa * (mbar - np.array([-15.0, 15.0])),
                                             -10, 10)], p)
    traj = simulate_state(p, policy, _flow_for(paths, 1), paths)
    closed = c / (1 + c) * xi + mbar / (1 + c) + 0.5 * paths.increment(0)
    np.testing.assert_allclose(traj[:, 1, 0], closed, atol=1e-12)


def test_nonfinite_state_raises():
    p = _problem(drift_b0=lambda x, m: np.full_like(x, np.inf))
    paths = sample_paths(p, 4, seed=0)
    with pytest.raises(SimulationError):
        simulate_state(p, FeedbackPolicy.constant(p, 0.0), _flow_for(paths, 1), paths)


def test_total_cost_trivial_cases():
    p = _problem(terminal_G=lambda x, m: np.ones_like(x), periods_k=3)
    paths = sample_paths(p, 50, seed=0)
    flow = _flow_for(paths, 3)
    assert total_cost(p, FeedbackPolicy.constant(p, 0.3), flow, paths) == pytest.approx(1.0)
    p2 = _problem(running_cost_L0=lambda x, a: np.ones_like(x), periods_k=4, horizon_T=2.5)
    paths2 = sample_paths(p2, 50, seed=0)
    assert total_cost(p2, FeedbackPolicy.constant(p2, 0.0), _flow_for(paths2, 4, 2.5), paths2) == pytest.approx(2.5)


def test_total_cost_affine_in_terminal():
    p = lq_problem(k=2, T=2.0)
    paths = sample_paths(p, 2000, seed=3)
    flow = _flow_for(paths, 2, 2.0)
    pol = FeedbackPolicy.constant(p, 0.2)
    g1 = lambda x, m: np.sin(x)
    g2 = lambda x, m: x**2
    zero = lambda x, m: np.zeros_like(x)
    both = lambda x, m: np.sin(x) + x**2
    lhs = total_cost(p, pol, flow, paths, both)
    rhs = total_cost(p, pol, flow, paths, g1) + total_cost(p, pol, flow, paths, g2) - total_cost(p, pol, flow, paths,
                                                                                                  zero)
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_lq_optimal_cost_beats_zero_policy():
    # single period, c = 1, xi ~ N(0,1), sigma^2 = 0.25, population at its equilibrium mean 0
    n = 100_000
    p = lq_problem(c=1.0, sigma=0.5, k=1)
    paths = sample_paths(p, n, seed=8)
    flow = MeasureFlow.uniform(1.0, [EmpiricalMeasure([0.0])] * 2)
    knots = np.array([-15.0, 15.0])
    opt = FeedbackPolicy([InterpolatedMap(knots, -0.5 * knots, -10, 10)], p)
    zero = FeedbackPolicy.constant(p, 0.0)
    c_opt, c_zero = path_costs(p, opt, flow, paths), path_costs(p, zero, flow, paths)
    # E[a^2 + xi^2 + (xi/2 + Z)^2] with a = -xi/2: 0.25 + 1 + 0.25 + 0.25
    assert abs(c_opt.mean() - 1.75) < 3 * c_opt.std() / np.sqrt(n)
    # E[xi^2 + (xi + Z)^2] = 1 + 1.25
    assert abs(c_zero.mean() - 2.25) < 3 * c_zero.std() / np.sqrt(n)
    assert c_opt.mean() < c_zero.mean()


def test_policy_clamps_to_action_box():
    p = lq_problem(action_bounds=(-1.0, 2.0))
    fn = InterpolatedMap(np.array([0.0, 1.0]), np.array([-5.0, 5.0]), -1.0, 2.0)
    pol = FeedbackPolicy([fn], p)
    out = pol(0, np.linspace(-3, 3, 50))
    assert out.min() >= -1.0 and out.max() <= 2.0


def test_interpolated_map_constant_extrapolation():
    fn = InterpolatedMap(np.array([0.0, 1.0, 2.0]), np.array([1.0, 0.0, -1.0]), -10, 10)
    np.testing.assert_allclose(fn(np.array([-5.0, 0.5, 9.0])), [1.0, 0.5, -1.0])
    assert fn.slope() == pytest.approx(-1.0)


def test_action_box_must_contain_zero():
    with pytest.raises(ValueError):
        _problem(action_low=0.5, action_high=1.0)


def test_trajectories_csv_layout():
    traj = np.arange(6, dtype=float).reshape(1, 3, 2)
    text = trajectories_csv(traj)
    lines = text.split("\r\n")
    assert lines[0] == "path,step,x0,x1"
    assert lines[1] == "0,0,0.0,1.0"


def test_path_bundle_shapes_checked():
    with pytest.raises(ValueError):
        PathBundle(np.zeros((3, 2, 1)), np.zeros((4, 1)))


def test_family_builder_and_applicability():
    p = build_problem({"family": "custom-polynomial", "f_cross": 1.0, "g_cross": 1.0, "g_poly": [0, 0, 1], "k": 2})
    assert p.applicability["ll_monotone"] and p.periods_k == 2
    assert not lq_problem().applicability["ll_monotone"]
    assert not tanh_problem().separated
    assert tanh_problem(c=3.0, scale_k=1.0).applicability["per_period_unique"]
    assert not tanh_problem(c=1.0, scale_k=1.0).applicability["per_period_unique"]
    with pytest.raises(ValueError):
        build_problem({"family": "nope"})
    assert polynomial_problem(b0=[1.0]).drift_b0(np.array([2.0]), None)[0] == 1.0
