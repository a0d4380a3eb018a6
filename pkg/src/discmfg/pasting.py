"""Multi-period equilibria by pasting single-period equilibria.

Stage value functions are defined backward, ``g_k = G`` and

    g_{i-1}(x, mu) = inf_a  L(x, a, mu) delta + E[g_i(x + b delta + sigma dZ, m^{mu, g_i})],

where ``m^{mu, g_i}`` is the equilibrium of the single-period game started
from ``mu`` with terminal cost ``g_i``.  The forward pass then solves period
``i`` from the law reached at ``t_{i-1}`` with terminal ``g_i``.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .analytic import lq_g_recursion
from .measures import EmpiricalMeasure, MeasureFlow, _quantiles
from .model import FeedbackPolicy, MfgProblem, PathBundle, _block_rng, sample_paths, standard_increments
from .optimize import minimize_scalar_batch
from .single_period import SolverOptions, solve_single_period, stage_objective

log = logging.getLogger(__name__)

MAX_GENERIC_K = 3
_STREAM_SUBSOLVE = 11


class RecursionBudgetError(RuntimeError):
    """Generic (non closed-form) value recursion requested beyond ``MAX_GENERIC_K`` periods."""


class StageSolveError(RuntimeError):
    """A single-period solve did not converge; ``stage`` is the 1-based period index."""

    def __init__(self, stage: int, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


def _thin(mu: EmpiricalMeasure, n: int) -> EmpiricalMeasure:
    """Mid-quantile representative cloud of at most ``n`` points (1-D)."""
    if mu.size <= n:
        return mu
    qs = (np.arange(n) + 0.5) / n
    return EmpiricalMeasure(_quantiles(mu.values, mu.weights, qs))


@dataclass(eq=False)
class _Table:
    sub_equilibrium: EmpiricalMeasure
    mu: EmpiricalMeasure
    grid: np.ndarray
    spline: CubicSpline


@dataclass(eq=False)
class ValueFunctionStage:
    """The stage-``index`` value function ``g_index(x, mu)``.

    ``next`` is stage ``index + 1`` (``None`` at the terminal stage).  LQ-family
    stages carry ``closed_form = (q, r)``.  Generic stages solve the
    sub-equilibrium from ``mu`` once per measure fingerprint, tabulate
    ``g(., mu)`` on a grid with a cubic spline and fall back to direct
    minimization outside the grid.
    """

    index: int
    problem: MfgProblem
    opts: SolverOptions = SolverOptions()
    next: Optional["ValueFunctionStage"] = None
    closed_form: Optional[tuple] = None
    n_sub: int = 2000
    n_grid: int = 257
    cache: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def terminal(self) -> bool:
        return self.next is None

    def __call__(self, x, m: EmpiricalMeasure):
        x = np.asarray(x, float)
        if self.terminal:
            return np.asarray(self.problem.terminal_G(x, m), float)
        if self.closed_form is not None:
            q, r = self.closed_form
            return q * (x - m.bar) ** 2 + r
        tab = self.table(m)
        out = np.asarray(tab.spline(x), float)
        outside = (x < tab.grid[0]) | (x > tab.grid[-1])
        if np.any(outside):
            out = np.array(out, copy=True)
            out[outside] = self._direct(x[outside], tab)
        return out

    def _direct(self, x, tab: _Table):
        f = stage_objective(self.problem, self.next, x, tab.mu, tab.sub_equilibrium, self.opts)
        lo, hi = self.problem.bounds
        a = minimize_scalar_batch(f, lo[0], hi[0], x.size, tol=self.opts.tol_a)
        return f(a)

    def sub_paths(self, mu: EmpiricalMeasure) -> PathBundle:
        """Thinned initial cloud with fixed common noise for sub-solves at this stage."""
        thin = _thin(mu, self.n_sub)
        rng = _block_rng(self.opts.seed, _STREAM_SUBSOLVE, self.index)
        inc = standard_increments(self.problem.noise.kind, rng, (thin.size, 1, 1), self.problem.delta)
        return PathBundle(inc, thin.points, self.opts.seed, self.problem.delta)

    def sub_equilibrium(self, mu: EmpiricalMeasure) -> EmpiricalMeasure:
        return self.table(mu).sub_equilibrium

    def table(self, mu: EmpiricalMeasure) -> _Table:
        key = mu.fingerprint()
        with self._lock:
            hit = self.cache.get(key)
        if hit is not None:
            return hit
        paths = self.sub_paths(mu)
        _, m_sub, report = solve_single_period(self.problem, self.next, self.opts, paths)
        if not report.converged:
            raise StageSolveError(self.index + 1, f"sub-equilibrium did not converge (residual {report.residual:.3e})")
        thin = EmpiricalMeasure(paths.initial_states)
        # cover the states earlier stages query: max|a| delta plus the widest
        # quadrature node per period; anything beyond uses the direct fallback
        sig = abs(float(np.asarray(self.problem.sigma).reshape(-1)[0]))
        lo_a, hi_a = self.problem.bounds
        reach = max(abs(lo_a[0]), abs(hi_a[0])) * self.problem.delta + 7.0 * sig * np.sqrt(self.problem.delta)
        pad = 1.0 + max(self.index, 1) * reach
        lo = min(float(thin.values.min()), float(m_sub.values.min())) - pad
        hi = max(float(thin.values.max()), float(m_sub.values.max())) + pad
        grid = np.linspace(lo, hi, self.n_grid)
        tab = _Table(m_sub, mu, grid, None)
        tab.spline = CubicSpline(grid, self._direct(grid, tab))
        with self._lock:
            tab = self.cache.setdefault(key, tab)
        return tab


def value_function_eval(stage: ValueFunctionStage, x, mu: EmpiricalMeasure, problem: Optional[MfgProblem] = None,
                        opts: Optional[SolverOptions] = None):
    """``g_i(x, mu)``; ``problem``/``opts`` default to the stage's own."""
    if problem is not None and problem is not stage.problem:
        raise ValueError("stage was built for a different problem")
    if opts is not None and opts != stage.opts:
        stage = build_stages(stage.problem, opts)[stage.index]
    return stage(x, mu)


def build_stages(problem: MfgProblem, opts: SolverOptions = SolverOptions(), n_sub: int = 2000) -> list:
    """Stages ``g_0 .. g_k`` (closed form for the LQ family)."""
    k = problem.periods_k
    closed = None
    if problem.family == "lq":
        from .families import lq_params

        closed = lq_g_recursion(lq_params(problem), k)
    elif k > MAX_GENERIC_K:
        raise RecursionBudgetError(f"generic value recursion supports k <= {MAX_GENERIC_K}, got {k}")
    elif problem.dim != 1:
        raise NotImplementedError("generic value recursion is one-dimensional")
    stages: list = [None] * (k + 1)
    stages[k] = ValueFunctionStage(k, problem, opts)
    for i in range(k - 1, -1, -1):
        cf = tuple(float(v) for v in closed[i]) if closed is not None else None
        stages[i] = ValueFunctionStage(i, problem, opts, next=stages[i + 1], closed_form=cf, n_sub=n_sub)
    return stages


def paste_equilibrium(problem: MfgProblem, opts: SolverOptions = SolverOptions(), paths: Optional[PathBundle] = None,
                      n_paths: int = 100_000, stages: Optional[list] = None):
    """Forward concatenation of single-period equilibria.

    Returns ``(policy, flow, reports)`` with one report per period.  Raises
    :class:`StageSolveError` naming the first period that fails to converge.
    """
    k = problem.periods_k
    if paths is None:
        paths = sample_paths(problem, n_paths, opts.seed)
    if paths.k != k:
        raise ValueError(f"paths have {paths.k} periods, problem has {k}")
    if stages is None:
        stages = build_stages(problem, opts)
    x = paths.initial_states
    measures = [EmpiricalMeasure(x)]
    maps, reports = [], []
    for i in range(1, k + 1):
        terminal = problem.terminal_G if i == k else stages[i]
        period = paths.period(i - 1, x)
        pol, _, report = solve_single_period(problem, terminal, opts, period)
        report.stage = i
        if not report.converged:
            raise StageSolveError(i, f"fixed point did not converge (residual {report.residual:.3e})")
        fn = pol.maps[0]
        mu = measures[-1]
        xi = period.xi()
        a = problem.clamp(np.asarray(fn(xi), float))
        x_next = xi + problem.drift(xi, a, mu) * problem.delta + problem.apply_sigma(period.increment(0))
        x = np.asarray(x_next, float).reshape(paths.n_paths, -1)
        measures.append(EmpiricalMeasure(x))
        maps.append(fn)
        reports.append(report)
        log.info("stage %d converged in %d iterations", i, report.iterations)
    return FeedbackPolicy(maps, problem), MeasureFlow.uniform(problem.horizon_T, measures), reports
