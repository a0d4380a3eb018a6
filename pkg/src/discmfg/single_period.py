"""Best responses and damped fixed-point iteration for the single-period game.

A single period starts from the initial cloud ``xi`` (law ``mu``), applies an
action ``a`` and the noise ``sigma dZ`` and pays ``L(xi, a, mu) delta +
terminal(X, m)``.  An equilibrium is a fixed point of the map ``Psi`` sending
a candidate population law ``m`` to the law of the best-responding state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .measures import EmpiricalMeasure, geodesic_mix, moment, wasserstein
from .model import FeedbackPolicy, InterpolatedMap, MfgProblem, PathBundle, standard_increments
from .optimize import minimize_box, minimize_scalar_batch

log = logging.getLogger(__name__)


class AprioriBoundError(RuntimeError):
    """A fixed-point iterate left the moment ball ``{||m||_p^p <= K}``."""


@dataclass(frozen=True)
class SolverOptions:
    damping: float = 0.5
    max_iters: int = 200
    tol_fp: Optional[float] = None  # None: 1e-3 * (1 + ||m0||_1)
    tol_a: float = 1e-8
    quadrature: str = "gauss_hermite"  # or "common_random_numbers"
    n_nodes: int = 21
    n_draws: int = 256
    moment_cap: Optional[float] = None
    moment_p: float = 2.0
    n_knots: int = 257
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must lie in (0, 1]")
        if self.tol_fp is not None and not self.tol_fp > 0:
            raise ValueError("tol_fp must be positive")
        if not self.tol_a > 0:
            raise ValueError("tol_a must be positive")
        if self.quadrature not in ("gauss_hermite", "common_random_numbers"):
            raise ValueError(f"unknown quadrature {self.quadrature!r}")


@dataclass
class EquilibriumReport:
    iterations: int
    residual: float
    exploitability: float
    exploitability_stderr: float
    converged: bool
    residual_history: list = field(default_factory=list)
    stage: Optional[int] = None
    value_estimate: Optional[float] = None

    def to_dict(self) -> dict:
        def num(v):
            return None if v is None or not np.isfinite(v) else float(v)

        return {
            "stage": self.stage,
            "iterations": self.iterations,
            "residual": num(self.residual),
            "exploitability": num(self.exploitability),
            "exploitability_stderr": num(self.exploitability_stderr),
            "converged": self.converged,
            "value_estimate": num(self.value_estimate),
            "residual_history": [float(r) for r in self.residual_history],
        }


def moment_cap_K(p: float, q: float, xi_moment_p: float, xi_moment_q: float, z_moment_p: float,
                 z_moment_q: float, C_b: float, C_L: float, C_G: float, c_L: float, delta: float) -> float:
    """A-priori moment bound for equilibrium laws of the single-period game.

    Arguments are the growth constants of the coefficients and the p-th and
    q-th absolute moments of the initial state and of the noise.
    """
    C_J = 2.0 * max(C_L, max(16.0**q * C_b, 1.0)) * (1.0 + xi_moment_q + z_moment_q)
    return 4.0**p * (2.0 + xi_moment_p + (C_J + C_G) / (c_L * delta) + z_moment_p)


def quadrature_rule(problem: MfgProblem, opts: SolverOptions, delta: Optional[float] = None):
    """Nodes (standardized increments, variance ``delta``) and weights for ``E[f(dZ)]``.

    Gaussian noise uses tensor Gauss-Hermite, Rademacher noise is enumerated
    exactly, ``common_random_numbers`` draws a fixed sample from ``opts.seed``.
    """
    delta = problem.delta if delta is None else delta
    d = problem.dim
    kind = problem.noise.kind
    if kind == "zero":
        return np.zeros((1, d)), np.ones(1)
    if opts.quadrature == "common_random_numbers":
        rng = np.random.default_rng([opts.seed, 7])
        z = standard_increments(kind, rng, (opts.n_draws, d), delta)
        return z, np.full(opts.n_draws, 1.0 / opts.n_draws)
    if kind == "rademacher_scaled":
        t1, w1 = np.array([-1.0, 1.0]), np.array([0.5, 0.5])
    else:
        t, w = np.polynomial.hermite.hermgauss(opts.n_nodes)
        t1, w1 = np.sqrt(2.0) * t, w / np.sqrt(np.pi)
    grids = np.meshgrid(*([t1] * d), indexing="ij")
    nodes = np.sqrt(delta) * np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([g.ravel() for g in np.meshgrid(*([w1] * d), indexing="ij")], axis=1), axis=1)
    return nodes, weights


def _expected_terminal(problem, terminal, x, a, mu, m, nodes, weights, delta):
    """``sum_l w_l terminal(x + b(x, a, mu) delta + sigma z_l, m)`` for flat 1-D arrays."""
    mean_next = x + problem.drift(x, a, mu) * delta
    noise = problem.apply_sigma(nodes[:, 0])
    y = mean_next[None, :] + noise[:, None]
    vals = np.asarray(terminal(y.ravel(), m), float).reshape(y.shape)
    return weights @ vals


def stage_objective(problem: MfgProblem, terminal: Callable, x, mu: EmpiricalMeasure, m: EmpiricalMeasure,
                    opts: SolverOptions, delta: Optional[float] = None):
    """Return ``f(a)`` evaluating the one-period objective at states ``x`` (1-D)."""
    delta = problem.delta if delta is None else delta
    nodes, weights = quadrature_rule(problem, opts, delta)
    x = np.asarray(x, float).reshape(-1)
    coupling = problem.coupling_F(x, mu) * delta

    def f(a):
        a = np.asarray(a, float)
        running = problem.running_cost_L0(x, a) * delta + coupling
        return running + _expected_terminal(problem, terminal, x, a, mu, m, nodes, weights, delta)

    return f


def best_response_pointwise(x, mu: EmpiricalMeasure, m: EmpiricalMeasure, terminal: Callable,
                            problem: MfgProblem, opts: SolverOptions = SolverOptions()):
    """Minimizer over the action box of ``L(x, a, mu) delta + E terminal(x + b delta + sigma Z, m)``.

    ``x`` may be a scalar or an array of states (``(n,)`` in 1-D, ``(n, d)``
    otherwise); the result has the matching shape.
    """
    lo, hi = problem.bounds
    delta = problem.delta
    if problem.dim == 1:
        xs = np.atleast_1d(np.asarray(x, float))
        f = stage_objective(problem, terminal, xs, mu, m, opts, delta)
        a = minimize_scalar_batch(f, lo[0], hi[0], xs.size, tol=opts.tol_a)
        return float(a[0]) if np.ndim(x) == 0 else a.reshape(np.shape(x))

    nodes, weights = quadrature_rule(problem, opts, delta)
    xs = np.atleast_2d(np.asarray(x, float))
    out = np.empty_like(xs)
    for j, xj in enumerate(xs):
        row = xj[None, :]
        coupling = float(problem.coupling_F(row, mu)[0]) * delta

        def f(a, row=row, coupling=coupling):
            a2 = a[None, :]
            y = row + problem.drift(row, a2, mu) * delta + problem.apply_sigma(nodes)
            return (float(problem.running_cost_L0(row, a2)[0]) * delta + coupling
                    + float(weights @ np.asarray(terminal(y, m), float)))

        out[j] = minimize_box(f, lo, hi, tol=opts.tol_a, seed=opts.seed + j)
    return out if np.ndim(x) == 2 else out[0]


def _knots(xi: np.ndarray, n_knots: int) -> np.ndarray:
    return np.unique(np.quantile(xi, np.linspace(0.0, 1.0, n_knots)))


def fit_best_response(problem: MfgProblem, terminal: Callable, mu: EmpiricalMeasure, m: EmpiricalMeasure,
                      opts: SolverOptions, knots: Optional[np.ndarray] = None):
    """Best-response feedback to ``m`` as an interpolant through knots of ``mu``."""
    lo, hi = problem.bounds
    if problem.dim == 1:
        if knots is None:
            knots = _knots(mu.values, opts.n_knots)
        acts = best_response_pointwise(knots, mu, m, terminal, problem, opts)
        return InterpolatedMap(knots, acts, lo[0], hi[0])
    from .model import NearestNeighborMap

    if knots is None:
        pts = mu.points
        step = max(1, pts.shape[0] // opts.n_knots)
        knots = pts[::step]
    acts = best_response_pointwise(knots, mu, m, terminal, problem, opts)
    return NearestNeighborMap(knots, acts, lo, hi)


def _push_forward(problem: MfgProblem, fn: Callable, paths: PathBundle, mu: EmpiricalMeasure):
    xi = paths.xi()
    a = problem.clamp(np.asarray(fn(xi), float))
    x = xi + problem.drift(xi, a, mu) * problem.delta + problem.apply_sigma(paths.increment(0))
    return EmpiricalMeasure(x)


def psi(problem: MfgProblem, terminal: Callable, m: EmpiricalMeasure, paths: PathBundle,
        opts: SolverOptions = SolverOptions(), knots=None):
    """One application of the best-response map; returns ``(feedback, Psi(m))``."""
    mu = EmpiricalMeasure(paths.initial_states)
    fn = fit_best_response(problem, terminal, mu, m, opts, knots)
    return fn, _push_forward(problem, fn, paths, mu)


def _per_path_cost(problem, fn, terminal, m, paths, mu):
    xi = paths.xi()
    a = problem.clamp(np.asarray(fn(xi), float))
    x = xi + problem.drift(xi, a, mu) * problem.delta + problem.apply_sigma(paths.increment(0))
    return problem.running_cost(xi, a, mu) * problem.delta + np.asarray(terminal(x, m), float)


def exploitability(problem: MfgProblem, policy: FeedbackPolicy, m: EmpiricalMeasure, terminal: Callable,
                   paths: PathBundle, opts: SolverOptions = SolverOptions(), return_stderr: bool = False):
    """``J_m(policy) - J_m(best response to m)`` under common random numbers."""
    mu = EmpiricalMeasure(paths.initial_states)
    br = fit_best_response(problem, terminal, mu, m, opts)
    diff = (_per_path_cost(problem, policy.maps[0], terminal, m, paths, mu)
            - _per_path_cost(problem, br, terminal, m, paths, mu))
    value = float(np.mean(diff))
    if not return_stderr:
        return value
    return value, float(np.std(diff, ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0


def solve_single_period(problem: MfgProblem, terminal: Optional[Callable], opts: SolverOptions,
                        paths: PathBundle, m0: Optional[EmpiricalMeasure] = None):
    """Damped Picard iteration ``m <- mix(m, Psi(m), damping)`` to a W1 tolerance.

    Returns ``(policy, measure, report)``.  The measure is the law of the state
    under the returned feedback (so it is consistent path by path); it lies
    within the final residual of the last iterate.  Non-convergence is
    reported through ``report.converged``, never raised.
    """
    if paths.k != 1:
        raise ValueError("single-period solve needs exactly one noise increment per path")
    problem = problem if problem.periods_k == 1 else problem.replace(periods_k=1, horizon_T=problem.delta)
    terminal = problem.terminal_G if terminal is None else terminal
    mu = EmpiricalMeasure(paths.initial_states)
    knots = _knots(mu.values, opts.n_knots) if problem.dim == 1 else None
    if m0 is None:
        m0 = _push_forward(problem, lambda x: np.zeros_like(x), paths, mu)
    tol = opts.tol_fp if opts.tol_fp is not None else 1e-3 * (1.0 + moment(m0, 1.0))

    m = m0
    history = []
    converged = False
    for it in range(1, opts.max_iters + 1):
        if opts.moment_cap is not None and moment(m, opts.moment_p) > opts.moment_cap:
            raise AprioriBoundError(
                f"iterate {it - 1} has moment {moment(m, opts.moment_p):.6g} > cap {opts.moment_cap:.6g}")
        fn, image = psi(problem, terminal, m, paths, opts, knots)
        res = wasserstein(m, image, p=1.0)
        history.append(res)
        log.debug("fixed-point iteration %d residual %.3e", it, res)
        if res < tol:
            converged = True
            break
        m = geodesic_mix(m, image, opts.damping)
    policy = FeedbackPolicy([fn], problem)
    expl, se = exploitability(problem, policy, image, terminal, paths, opts, return_stderr=True)
    report = EquilibriumReport(iterations=len(history), residual=history[-1], exploitability=expl,
                               exploitability_stderr=se, converged=converged, residual_history=history)
    if not converged:
        log.warning("single-period iteration stopped after %d steps, residual %.3e", it, history[-1])
    return policy, image, report
