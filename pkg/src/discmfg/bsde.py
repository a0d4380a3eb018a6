"""Backward stochastic difference equations and the Hamiltonian-based MFG iteration.

The uncontrolled state ``Y_{i+1} = Y_i + b0(Y_i, m_i) delta + sigma dZ_{i+1}``
carries the backward equation

    Y_i = E[Y_{i+1} | Y_i] + delta H(Y_i, m_i, Z_i),    Z_i = E[Y_{i+1} dZ_{i+1} | Y_i] / delta,

with terminal value ``G(Y_k, m_k)`` (calligraphic Y/Z in the math; here
``values``/``z_values``).  Conditional expectations are least-squares
regressions on the Markov state.  The equilibrium loop alternates a backward
sweep against the current flow with a forward re-simulation of the
controlled state.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .measures import EmpiricalMeasure, MeasureFlow, geodesic_mix, moment, wasserstein
from .model import (FeedbackPolicy, InterpolatedMap, MfgProblem, PathBundle, flow_from_trajectories,
                    sample_paths, simulate_state)
from .optimize import minimize_scalar_batch
from .single_period import EquilibriumReport

log = logging.getLogger(__name__)


class RegressionWarning(UserWarning):
    """Ill-conditioned regression; a larger ridge was used."""


@dataclass(frozen=True)
class BsdeOptions:
    basis: str = "poly"  # "poly" or "indicator"
    basis_degree: int = 3
    n_bumps: int = 2
    ridge: float = 0.0  # relative to the largest Gram diagonal entry
    damping: float = 0.5
    max_iters: int = 100
    tol_fp: Optional[float] = None  # None: 1e-3 * (1 + ||m_0||_1)
    tol_a: float = 1e-8
    n_knots: int = 257
    n_paths: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.basis not in ("poly", "indicator"):
            raise ValueError(f"unknown basis {self.basis!r}")
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    states: np.ndarray  # uncontrolled Y, (n, k+1)
    values: np.ndarray  # (n, k+1)
    z_values: np.ndarray  # (n, k, 1)
    actions: np.ndarray  # (n, k)
    orth_residual: np.ndarray  # (k,) correlation of the martingale residual with dZ
    policy: Optional[FeedbackPolicy] = None


@dataclass(frozen=True)
class GirsanovWeights:
    weights: np.ndarray

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)


def _pair_sums(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a.T @ b`` by row-wise pairwise summation; independent of BLAS threading."""
    return np.stack([np.sum(a.T * col[None, :], axis=1) for col in b.T], axis=1)


def _gram(X: np.ndarray) -> np.ndarray:
    p = X.shape[1]
    iu, ju = np.triu_indices(p)
    Xt = np.ascontiguousarray(X.T)
    sums = np.sum(Xt[iu] * Xt[ju], axis=1)
    out = np.empty((p, p))
    out[iu, ju] = sums
    out[ju, iu] = sums
    return out


class Regression:
    """Least-squares conditional expectation given a scalar state.

    ``poly`` uses monomials of the standardized state up to ``degree`` plus
    ``n_bumps`` Gaussian bumps; ``indicator`` one-hot encodes distinct state
    values, which gives exact conditional means on recombining or finite trees.
    """

    def __init__(self, x: np.ndarray, basis: str = "poly", degree: int = 3, n_bumps: int = 2,
                 ridge: float = 0.0):
        self.x = np.asarray(x, float)
        self.basis, self.degree, self.n_bumps, self.ridge = basis, degree, n_bumps, ridge
        if basis == "indicator":
            self.levels, self.inverse = np.unique(self.x, return_inverse=True)
            self.counts = np.bincount(self.inverse).astype(float)
        else:
            self.center = float(np.mean(self.x))
            spread = float(np.std(self.x))
            self.degenerate = not spread > 1e-14 * max(1.0, abs(self.center))
            self.scale = spread if not self.degenerate else 1.0
            self.design = self._features(self.x)
            self._system = None

    def _features(self, x):
        if self.degenerate:
            return np.ones((np.size(x), 1))
        z = (np.asarray(x, float) - self.center) / self.scale
        cols = [z**j for j in range(self.degree + 1)]
        if self.n_bumps:
            for c in np.linspace(-1.0, 1.0, self.n_bumps):
                cols.append(np.exp(-0.5 * (z - c) ** 2))
        return np.stack(cols, axis=1)

    def fit(self, targets: np.ndarray) -> np.ndarray:
        """Fit every column of ``targets``; returns fitted values at the sample points."""
        t = np.asarray(targets, float).reshape(self.x.size, -1)
        if self.basis == "indicator":
            sums = np.stack([np.bincount(self.inverse, weights=t[:, j]) for j in range(t.shape[1])], axis=1)
            self.coef = sums / self.counts[:, None]
            return self.coef[self.inverse]
        X = self.design
        if self._system is None:
            gram = _gram(X)
            p = X.shape[1]
            scale = float(np.max(np.diag(gram)))
            reg = gram + self.ridge * scale * np.eye(p)
            if np.linalg.cond(reg) > 1e12:
                warnings.warn("ill-conditioned regression design; increasing ridge", RegressionWarning, stacklevel=2)
                reg = gram + max(self.ridge, 1e-10) * scale * np.eye(p)
            self._system = reg
        self.coef = np.linalg.solve(self._system, _pair_sums(X, t))
        return X @ self.coef

    def fit_scaled(self, target: np.ndarray, scale: np.ndarray) -> np.ndarray:
        """Least-squares ``f`` in the span of the basis with ``target ~ f(x) * scale``.

        Returns ``f`` at the sample points and stores its coefficients in
        ``coef``.  The residual ``target - f(x) scale`` is orthogonal to
        ``scale`` times every basis function.
        """
        t = np.asarray(target, float).reshape(-1)
        s = np.asarray(scale, float).reshape(-1)
        if self.basis == "indicator":
            num = np.bincount(self.inverse, weights=t * s, minlength=self.levels.size)
            den = np.bincount(self.inverse, weights=s * s, minlength=self.levels.size)
            self.coef = np.divide(num, den, out=np.zeros_like(num), where=den > 0)[:, None]
            return self.coef[self.inverse, 0]
        Xs = self.design * s[:, None]
        gram = _gram(Xs)
        p = gram.shape[0]
        scale_g = float(np.max(np.diag(gram)))
        if not scale_g > 0:
            self.coef = np.zeros((p, 1))
            return np.zeros(t.size)
        reg = gram + self.ridge * scale_g * np.eye(p)
        if np.linalg.cond(reg) > 1e12:
            warnings.warn("ill-conditioned regression design; increasing ridge", RegressionWarning, stacklevel=2)
            reg = gram + max(self.ridge, 1e-10) * scale_g * np.eye(p)
        self.coef = np.linalg.solve(reg, _pair_sums(Xs, t[:, None]))
        return (self.design @ self.coef)[:, 0]

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self.basis == "indicator":
            idx = np.clip(np.searchsorted(self.levels, x), 0, self.levels.size - 1)
            left = np.clip(idx - 1, 0, self.levels.size - 1)
            idx = np.where(np.abs(self.levels[left] - x) < np.abs(self.levels[idx] - x), left, idx)
            return self.coef[idx]
        return self._features(x) @ self.coef


def _sigma_scalar(problem: MfgProblem) -> float:
    return float(np.asarray(problem.sigma, float).reshape(-1)[0])


def hamiltonian(x, a, m: EmpiricalMeasure, z, problem: MfgProblem):
    """``h(x, a, m, z) = L0(x, a) + F(x, m) + z a / sigma`` (one dimension)."""
    return problem.running_cost(x, a, m) + np.asarray(z) * np.asarray(a) / _sigma_scalar(problem)


def minimize_hamiltonian(x, m: EmpiricalMeasure, z, problem: MfgProblem, tol: float = 1e-8):
    """Argmin over the action box of ``a -> h(x, a, m, z)``.

    Uses ``clamp(-z / (2 c sigma))`` when the problem declares a quadratic
    control cost ``c a^2``; otherwise a bracketed golden-section search.
    """
    x = np.atleast_1d(np.asarray(x, float))
    z = np.broadcast_to(np.asarray(z, float), x.shape)
    sig = _sigma_scalar(problem)
    lo, hi = problem.bounds
    c = problem.quadratic_control_cost
    if c is not None:
        a = np.clip(-z / (2.0 * c * sig), lo[0], hi[0])
    else:
        a = minimize_scalar_batch(lambda a: problem.running_cost_L0(x, a) + z * a / sig,
                                  lo[0], hi[0], x.size, tol=tol)
    return a


def uncontrolled_states(problem: MfgProblem, flow: Optional[MeasureFlow], paths: PathBundle) -> np.ndarray:
    """Driftless-in-control paths ``(n, k+1)``; ``flow=None`` uses the law of ``Y`` itself."""
    if paths.dim != 1:
        raise NotImplementedError("the backward solver handles one-dimensional states")
    k = paths.k
    delta = problem.horizon_T / k
    y = np.empty((paths.n_paths, k + 1))
    y[:, 0] = paths.xi()
    for i in range(k):
        m_i = flow[i] if flow is not None else EmpiricalMeasure(y[:, i])
        y[:, i + 1] = y[:, i] + problem.drift_b0(y[:, i], m_i) * delta + problem.apply_sigma(paths.increment(i))
    return y


def solve_bsde(problem: MfgProblem, flow: MeasureFlow, paths: PathBundle, opts: BsdeOptions = BsdeOptions(),
               driver: Optional[Callable] = None) -> BsdeSolution:
    """Backward sweep for the equation driven by the optimized Hamiltonian.

    ``driver(y, m, z)`` replaces ``H`` when given (no policy is produced then).
    """
    if not problem.separated:
        raise ValueError("the backward solver needs a separated drift a + b0(x, m)")
    k = paths.k
    delta = problem.horizon_T / k
    y = uncontrolled_states(problem, flow, paths)
    n = paths.n_paths
    values = np.empty((n, k + 1))
    zs = np.zeros((n, k, 1))
    actions = np.zeros((n, k))
    orth = np.zeros(k)
    maps = [None] * k
    lo, hi = problem.bounds
    values[:, k] = problem.terminal_G(y[:, k], flow[k])
    for i in range(k - 1, -1, -1):
        dz = paths.increment(i)
        nxt = values[:, i + 1]
        reg = Regression(y[:, i], opts.basis, opts.basis_degree, opts.n_bumps, opts.ridge)
        cond_mean = reg.fit(nxt)[:, 0]
        mean_coef = reg.coef
        # projection of the centered value on dZ given Y_i; since E[dZ^2 | Y_i] = delta
        # this is E[Y_{i+1} dZ | Y_i] / delta, and the residual is orthogonal to dZ
        z_i = reg.fit_scaled(nxt - cond_mean, dz)
        reg.coef = np.column_stack([mean_coef[:, 0], reg.coef[:, 0]])
        if driver is not None:
            drv = np.asarray(driver(y[:, i], flow[i], z_i), float)
        else:
            if opts.basis == "indicator":
                knots = reg.levels
                z_knots = reg.coef[:, 1]
            else:
                knots = np.unique(np.quantile(y[:, i], np.linspace(0.0, 1.0, opts.n_knots)))
                z_knots = reg.predict(knots)[:, 1]
            a_knots = minimize_hamiltonian(knots, flow[i], z_knots, problem, opts.tol_a)
            maps[i] = InterpolatedMap(knots, a_knots, lo[0], hi[0])
            actions[:, i] = maps[i](y[:, i])
            drv = hamiltonian(y[:, i], actions[:, i], flow[i], z_i, problem)
        values[:, i] = cond_mean + delta * drv
        zs[:, i, 0] = z_i
        resid = nxt - cond_mean - z_i * dz
        if np.std(resid) > 0 and np.std(dz) > 0:
            orth[i] = float(np.corrcoef(resid, dz)[0, 1])
    policy = FeedbackPolicy(maps, problem) if driver is None else None
    return BsdeSolution(y, values, zs, actions, orth, policy)


def girsanov_weights(policy: FeedbackPolicy, states: np.ndarray, paths: PathBundle,
                     problem: MfgProblem) -> GirsanovWeights:
    """Density ``exp(sum beta_j dZ_{j+1} / sigma - 0.5 sum |beta_j / sigma|^2 delta)`` per path.

    ``states`` are the uncontrolled paths the feedback is evaluated on.
    """
    k = paths.k
    delta = problem.horizon_T / k
    sig = _sigma_scalar(problem)
    logw = np.zeros(paths.n_paths)
    for j in range(k):
        theta = policy(j, states[:, j]) / sig
        logw += theta * paths.increment(j) - 0.5 * theta**2 * delta
    return GirsanovWeights(np.exp(logw))


def girsanov_flow(policy: FeedbackPolicy, states: np.ndarray, paths: PathBundle, problem: MfgProblem) -> MeasureFlow:
    """Controlled-law flow obtained by reweighting the uncontrolled paths."""
    w = girsanov_weights(policy, states, paths, problem).weights
    return MeasureFlow.uniform(problem.horizon_T,
                               [EmpiricalMeasure.normalized(states[:, i], w) for i in range(states.shape[1])])


def _mix_flow(old: MeasureFlow, new: MeasureFlow, lam: float) -> MeasureFlow:
    return MeasureFlow(old.times, tuple(geodesic_mix(a, b, lam) for a, b in zip(old.measures, new.measures)))


def flow_distance(a: MeasureFlow, b: MeasureFlow, p: float = 1.0) -> float:
    return max(wasserstein(x, y, p=p) for x, y in zip(a.measures, b.measures))


def solve_mfg_bsde(problem: MfgProblem, opts: BsdeOptions = BsdeOptions(), paths: Optional[PathBundle] = None,
                   flow0: Optional[MeasureFlow] = None):
    """Fixed-point loop: backward sweep against the flow, then forward re-simulation.

    Starts from the law of the uncontrolled state, damps flow updates slice by
    slice through quantile mixing and stops when the largest W1 change over
    the grid falls below the tolerance.  Returns ``(policy, flow, report)``
    where ``flow`` is the law of the state under the returned policy.
    """
    if paths is None:
        paths = sample_paths(problem, opts.n_paths, opts.seed)
    if flow0 is None:
        y = uncontrolled_states(problem, None, paths)
        flow0 = MeasureFlow.uniform(problem.horizon_T, [EmpiricalMeasure(y[:, i]) for i in range(paths.k + 1)])
    tol = opts.tol_fp if opts.tol_fp is not None else 1e-3 * (1.0 + moment(flow0[0], 1.0))
    flow = flow0
    history = []
    converged = False
    for it in range(1, opts.max_iters + 1):
        sol = solve_bsde(problem, flow, paths, opts)
        traj = simulate_state(problem, sol.policy, flow, paths)
        image = flow_from_trajectories(traj, problem.horizon_T)
        res = flow_distance(flow, image)
        history.append(res)
        log.debug("bsde iteration %d residual %.3e", it, res)
        if res < tol:
            converged = True
            break
        flow = _mix_flow(flow, image, opts.damping)
    values0 = float(np.mean(sol.values[:, 0]))
    report = EquilibriumReport(iterations=len(history), residual=history[-1], exploitability=float("nan"),
                               exploitability_stderr=float("nan"), converged=converged, residual_history=history,
                               value_estimate=values0)
    if not converged:
        log.warning("bsde iteration stopped after %d steps, residual %.3e", len(history), history[-1])
    return sol.policy, image, report
