"""Optimal control against a frozen measure flow, by backward dynamic programming on a grid.

Used to certify multi-period equilibria: the exploitability of a policy is its
cost minus the cost of this best response, both simulated on the same paths.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .measures import MeasureFlow
from .model import FeedbackPolicy, InterpolatedMap, MfgProblem, PathBundle, path_costs
from .optimize import minimize_scalar_batch
from .single_period import SolverOptions, quadrature_rule


def best_response_flow(problem: MfgProblem, flow: MeasureFlow, opts: SolverOptions = SolverOptions(),
                       n_grid: int = 241, width: float = 6.0) -> FeedbackPolicy:
    """Markov best response to ``flow`` for a one-dimensional problem.

    Value functions live on a fixed grid covering the flow's support widened
    by ``width`` noise standard deviations over the horizon, with cubic
    interpolation in between; expectations use the solver's quadrature.
    """
    if problem.dim != 1:
        raise NotImplementedError("grid dynamic programming is one-dimensional")
    k = flow.k
    delta = problem.horizon_T / k
    sig = abs(float(np.asarray(problem.sigma).reshape(-1)[0]))
    lo_a, hi_a = problem.bounds
    lo = min(float(m.values.min()) for m in flow.measures)
    hi = max(float(m.values.max()) for m in flow.measures)
    pad = width * sig * np.sqrt(problem.horizon_T) + 1.0
    grid = np.linspace(lo - pad, hi + pad, n_grid)
    nodes, weights = quadrature_rule(problem, opts, delta)
    noise = problem.apply_sigma(nodes[:, 0])

    value_next = lambda y: np.asarray(problem.terminal_G(y, flow[k]), float)
    maps = [None] * k
    for i in range(k - 1, -1, -1):
        m_i = flow[i]
        coupling = problem.coupling_F(grid, m_i) * delta
        drift0 = problem.drift_b0(grid, m_i) if problem.separated else None
        vn = value_next

        def objective(a, vn=vn, m_i=m_i, coupling=coupling, drift0=drift0):
            b = a + drift0 if drift0 is not None else problem.drift(grid, a, m_i)
            y = (grid + b * delta)[None, :] + noise[:, None]
            ev = weights @ vn(y.ravel()).reshape(y.shape)
            return problem.running_cost_L0(grid, a) * delta + coupling + ev

        acts = minimize_scalar_batch(objective, lo_a[0], hi_a[0], grid.size, tol=opts.tol_a)
        vals = objective(acts)
        maps[i] = InterpolatedMap(grid, acts, lo_a[0], hi_a[0])
        value_next = CubicSpline(grid, vals, extrapolate=True)
    return FeedbackPolicy(maps, problem)


def multi_period_exploitability(problem: MfgProblem, policy: FeedbackPolicy, flow: MeasureFlow, paths: PathBundle,
                                opts: SolverOptions = SolverOptions(), best: Optional[FeedbackPolicy] = None):
    """``J(policy) - J(best response)`` against ``flow``, with its standard error."""
    if best is None:
        best = best_response_flow(problem, flow, opts)
    diff = path_costs(problem, policy, flow, paths) - path_costs(problem, best, flow, paths)
    return float(np.mean(diff)), float(np.std(diff, ddof=1) / np.sqrt(diff.size))
