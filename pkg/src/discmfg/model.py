"""Problem data, noise, feedback policies and forward simulation.

Conventions: state arrays are flat ``(n,)`` in one dimension and ``(n, d)``
otherwise; every user coefficient must accept such arrays and broadcast.
``Z`` always denotes the standardized driving martingale whose increments
have variance ``delta`` per component, so the state noise is ``sigma dZ``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .measures import EmpiricalMeasure, MeasureFlow

NOISE_KINDS = ("gaussian_increments", "rademacher_scaled", "zero")
BLOCK_SIZE = 4096
_STREAM_INITIAL = 0
_STREAM_NOISE = 1


class SimulationError(RuntimeError):
    """Raised when a simulated state or cost becomes non-finite."""


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian_increments"

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")


@dataclass(frozen=True)
class InitialLaw:
    """Law of the initial state: ``normal`` (mean, std), ``uniform`` (low, high) or ``point``."""

    kind: str = "normal"
    mean: float = 0.0
    std: float = 1.0
    low: float = -1.0
    high: float = 1.0

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "normal":
            return self.mean + self.std * rng.standard_normal(shape)
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high, shape)
        if self.kind == "point":
            return np.full(shape, float(self.mean))
        raise ValueError(f"unknown initial law {self.kind!r}")

    @property
    def expected(self) -> float:
        if self.kind == "uniform":
            return 0.5 * (self.low + self.high)
        return float(self.mean)

    @property
    def variance(self) -> float:
        if self.kind == "normal":
            return float(self.std) ** 2
        if self.kind == "uniform":
            return (self.high - self.low) ** 2 / 12.0
        return 0.0


def _zero_drift(x, m):
    return np.zeros_like(x)


def _zero_coupling(x, m):
    return np.zeros(np.shape(x)[0])


@dataclass(frozen=True, eq=False)
class MfgProblem:
    """Coefficients of a discrete-time MFG with separated cost ``L0(x, a) + F(x, m)``.

    The drift used by the multi-period machinery is ``a + b0(x, m)``.  A general
    single-period drift ``b(x, a, m)`` may be given through ``drift_b``; it is
    only honoured by the single-period best response.
    """

    dim: int = 1
    drift_b0: Callable = _zero_drift
    running_cost_L0: Callable = None
    coupling_F: Callable = _zero_coupling
    terminal_G: Callable = _zero_coupling
    action_low: float = -10.0
    action_high: float = 10.0
    sigma: float = 1.0
    horizon_T: float = 1.0
    periods_k: int = 1
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    initial: InitialLaw = field(default_factory=InitialLaw)
    drift_b: Optional[Callable] = None
    # L0(x, a) = c |a|^2 + (terms without a): enables the closed-form Hamiltonian argmin
    quadratic_control_cost: Optional[float] = None
    family: Optional[str] = None
    params: dict = field(default_factory=dict)
    # which theorems apply to this instance; informational only
    applicability: dict = field(default_factory=dict)

    def __post_init__(self):
        lo = np.broadcast_to(np.asarray(self.action_low, float), (self.dim,))
        hi = np.broadcast_to(np.asarray(self.action_high, float), (self.dim,))
        if np.any(lo > 0) or np.any(hi < 0):
            raise ValueError("action set must contain 0")
        if np.any(lo > hi):
            raise ValueError("empty action set")
        if not self.horizon_T > 0 or int(self.periods_k) < 1:
            raise ValueError("need horizon_T > 0 and periods_k >= 1")
        sig = np.atleast_2d(np.asarray(self.sigma, float))
        if self.dim == 1 and sig.size == 1:
            if sig[0, 0] == 0:
                raise ValueError("sigma must be invertible")
        elif sig.shape != (self.dim, self.dim) or abs(np.linalg.det(sig)) < 1e-300:
            raise ValueError("sigma must be an invertible d x d matrix")
        if self.running_cost_L0 is None:
            object.__setattr__(self, "running_cost_L0", _default_control_cost)
            object.__setattr__(self, "quadratic_control_cost", 1.0)

    @property
    def delta(self) -> float:
        return self.horizon_T / self.periods_k

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.broadcast_to(np.asarray(self.action_low, float), (self.dim,)).copy()
        hi = np.broadcast_to(np.asarray(self.action_high, float), (self.dim,)).copy()
        return lo, hi

    @property
    def sigma_matrix(self) -> np.ndarray:
        sig = np.atleast_2d(np.asarray(self.sigma, float))
        return sig * np.eye(self.dim) if sig.size == 1 else sig

    @property
    def separated(self) -> bool:
        return self.drift_b is None

    def drift(self, x, a, m):
        """Full drift ``b(x, a, m)``."""
        if self.drift_b is not None:
            return self.drift_b(x, a, m)
        return a + self.drift_b0(x, m)

    def running_cost(self, x, a, m):
        return self.running_cost_L0(x, a) + self.coupling_F(x, m)

    def apply_sigma(self, dz):
        """``sigma dZ`` for flat (1-D) or ``(n, d)`` increments."""
        if self.dim == 1:
            return float(np.asarray(self.sigma).reshape(-1)[0]) * dz
        return dz @ self.sigma_matrix.T

    def clamp(self, a):
        lo, hi = self.bounds
        if self.dim == 1:
            return np.clip(a, lo[0], hi[0])
        return np.clip(a, lo, hi)

    def replace(self, **changes) -> "MfgProblem":
        return replace(self, **changes)


def _default_control_cost(x, a):
    a = np.asarray(a, float)
    return a**2 if a.ndim <= 1 else np.sum(a**2, axis=-1)


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Initial states and standardized noise increments for ``n_paths`` paths.

    ``noise_increments`` has shape ``(n, k, d)``, ``initial_states`` ``(n, d)``.
    """

    noise_increments: np.ndarray
    initial_states: np.ndarray
    seed: int = 0
    delta: float = 1.0

    def __post_init__(self):
        inc = np.asarray(self.noise_increments, float)
        x0 = np.asarray(self.initial_states, float)
        if inc.ndim == 2:
            inc = inc[:, :, None]
        if x0.ndim == 1:
            x0 = x0[:, None]
        if inc.shape[0] != x0.shape[0] or inc.shape[2] != x0.shape[1]:
            raise ValueError("inconsistent path bundle shapes")
        inc.flags.writeable = False
        x0.flags.writeable = False
        object.__setattr__(self, "noise_increments", inc)
        object.__setattr__(self, "initial_states", x0)

    @property
    def n_paths(self) -> int:
        return self.initial_states.shape[0]

    @property
    def k(self) -> int:
        return self.noise_increments.shape[1]

    @property
    def dim(self) -> int:
        return self.initial_states.shape[1]

    def xi(self) -> np.ndarray:
        return self.initial_states[:, 0] if self.dim == 1 else self.initial_states

    def increment(self, i: int) -> np.ndarray:
        inc = self.noise_increments[:, i, :]
        return inc[:, 0] if self.dim == 1 else inc

    def coarsen(self, k: int) -> "PathBundle":
        """Aggregate increments onto a grid of ``k`` periods (same Brownian path)."""
        if self.k % k:
            raise ValueError(f"cannot coarsen {self.k} periods to {k}")
        r = self.k // k
        inc = self.noise_increments.reshape(self.n_paths, k, r, self.dim).sum(axis=2)
        return PathBundle(inc, self.initial_states, self.seed, self.delta * r)

    def period(self, i: int, initial_states=None) -> "PathBundle":
        """Single-period bundle for period ``i`` starting from ``initial_states``."""
        x0 = self.initial_states if initial_states is None else initial_states
        return PathBundle(self.noise_increments[:, i : i + 1, :], x0, self.seed, self.delta)

    def subset(self, n: int) -> "PathBundle":
        return PathBundle(self.noise_increments[:n], self.initial_states[:n], self.seed, self.delta)


def _block_rng(seed: int, stream: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, stream, block])
    return np.random.Generator(np.random.Philox(ss))


def _blocked(n: int, draw: Callable[[np.random.Generator, int], np.ndarray], seed: int, stream: int):
    """Concatenate per-block draws; path j only depends on (seed, j)."""
    parts = []
    for b in range((n + BLOCK_SIZE - 1) // BLOCK_SIZE):
        parts.append(draw(_block_rng(seed, stream, b), BLOCK_SIZE))
    return np.concatenate(parts, axis=0)[:n]


def standard_increments(kind: str, rng: np.random.Generator, shape, delta: float) -> np.ndarray:
    if kind == "gaussian_increments":
        return np.sqrt(delta) * rng.standard_normal(shape)
    if kind == "rademacher_scaled":
        signs = rng.integers(0, 2, size=shape) * 2 - 1
        return np.sqrt(delta) * signs.astype(float)
    return np.zeros(shape)


def sample_paths(problem: MfgProblem, n_paths: int, seed: int, k: Optional[int] = None) -> PathBundle:
    """Draw initial states and noise increments with a counter-based generator.

    Paths are generated in fixed-size blocks keyed by ``(seed, stream, block)``,
    so a path's values do not depend on ``n_paths`` or on generation order.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    k = problem.periods_k if k is None else k
    d = problem.dim
    delta = problem.horizon_T / k
    kind = problem.noise.kind
    x0 = _blocked(n_paths, lambda g, b: problem.initial.sample(g, (b, d)), seed, _STREAM_INITIAL)
    inc = _blocked(n_paths, lambda g, b: standard_increments(kind, g, (b, k, d), delta), seed, _STREAM_NOISE)
    return PathBundle(inc, x0, seed, delta)


def binomial_tree_paths(k: int, delta: float, xi=0.0) -> PathBundle:
    """All ``2**k`` Rademacher paths with increments ``+-sqrt(delta)``, one per leaf."""
    leaves = np.arange(2**k)
    bits = (leaves[:, None] >> np.arange(k - 1, -1, -1)[None, :]) & 1
    inc = np.sqrt(delta) * (2.0 * bits - 1.0)
    x0 = np.full(2**k, float(xi))
    return PathBundle(inc, x0, 0, delta)


class InterpolatedMap:
    """Piecewise-linear feedback through sorted knots, constant beyond them."""

    def __init__(self, knots, actions, low: float, high: float):
        knots = np.asarray(knots, float).reshape(-1)
        actions = np.asarray(actions, float).reshape(-1)
        order = np.argsort(knots, kind="stable")
        knots, actions = knots[order], actions[order]
        keep = np.concatenate(([True], np.diff(knots) > 0))
        self.knots = knots[keep]
        self.actions = np.clip(actions[keep], low, high)
        self.low, self.high = float(low), float(high)

    def __call__(self, x):
        x = np.asarray(x, float)
        return np.clip(np.interp(x, self.knots, self.actions), self.low, self.high)

    def slope(self) -> float:
        """Least-squares slope of the knot table (diagnostic for affine feedbacks)."""
        if self.knots.size < 2:
            return 0.0
        return float(np.polyfit(self.knots, self.actions, 1)[0])


class NearestNeighborMap:
    """k-NN averaged feedback table for ``d > 1``."""

    def __init__(self, knots, actions, low, high, neighbors: int = 4):
        self.knots = np.asarray(knots, float)
        self.actions = np.asarray(actions, float)
        self.low, self.high = np.asarray(low, float), np.asarray(high, float)
        self.neighbors = min(neighbors, self.knots.shape[0])
        self._tree = cKDTree(self.knots)

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        _, idx = self._tree.query(x, k=self.neighbors)
        idx = idx.reshape(x.shape[0], -1)
        return np.clip(self.actions[idx].mean(axis=1), self.low, self.high)


class FeedbackPolicy:
    """Per-period Markov feedback maps ``alpha_{t_i}(x)``, clamped to the action box."""

    def __init__(self, maps: Sequence[Callable], problem: MfgProblem):
        self.maps = tuple(maps)
        self._problem = problem

    @classmethod
    def constant(cls, problem: MfgProblem, value: float = 0.0, k: Optional[int] = None) -> "FeedbackPolicy":
        k = problem.periods_k if k is None else k
        d = problem.dim
        v = np.broadcast_to(np.asarray(value, float), (d,))
        if d == 1:
            fn = lambda x: np.full(np.shape(x)[0] if np.ndim(x) else 1, float(v[0]))
        else:
            fn = lambda x: np.tile(v, (np.atleast_2d(x).shape[0], 1))
        return cls([fn] * k, problem)

    @property
    def k(self) -> int:
        return len(self.maps)

    def __call__(self, i: int, x):
        return self._problem.clamp(np.asarray(self.maps[i](x), float))

    def knot_rows(self):
        """Rows ``(period, knot, action)`` for policies built from interpolants."""
        for i, fn in enumerate(self.maps):
            if isinstance(fn, InterpolatedMap):
                for x, a in zip(fn.knots, fn.actions):
                    yield i, float(x), float(a)


def simulate_state(problem: MfgProblem, policy: FeedbackPolicy, flow: MeasureFlow, paths: PathBundle) -> np.ndarray:
    """Euler recursion ``X_{i+1} = X_i + (alpha_i(X_i) + b0(X_i, m_i)) delta + sigma dZ_{i+1}``.

    Returns trajectories of shape ``(n, k + 1, d)``.
    """
    k = paths.k
    if len(flow) != k + 1 or policy.k < k:
        raise ValueError("flow needs k+1 measures and policy k maps")
    delta = problem.horizon_T / k
    x = paths.xi().copy()
    out = np.empty((paths.n_paths, k + 1, paths.dim))
    out[:, 0, :] = paths.initial_states
    for i in range(k):
        a = policy(i, x)
        x = x + problem.drift(x, a, flow[i]) * delta + problem.apply_sigma(paths.increment(i))
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at step {i + 1}")
        out[:, i + 1, :] = x.reshape(paths.n_paths, -1)
    return out


def _flat(traj_slice: np.ndarray, dim: int) -> np.ndarray:
    return traj_slice[:, 0] if dim == 1 else traj_slice


def path_costs(problem: MfgProblem, policy: FeedbackPolicy, flow: MeasureFlow, paths: PathBundle,
               terminal: Optional[Callable] = None) -> np.ndarray:
    """Per-path realized cost ``sum_i L(X_i, alpha_i, m_i) delta + G(X_k, m_k)``."""
    traj = simulate_state(problem, policy, flow, paths)
    k = paths.k
    delta = problem.horizon_T / k
    G = problem.terminal_G if terminal is None else terminal
    total = np.zeros(paths.n_paths)
    for i in range(k):
        x = _flat(traj[:, i, :], problem.dim)
        total += problem.running_cost(x, policy(i, x), flow[i]) * delta
    total += G(_flat(traj[:, k, :], problem.dim), flow[k])
    if not np.all(np.isfinite(total)):
        raise SimulationError("non-finite cost")
    return total


def total_cost(problem: MfgProblem, policy: FeedbackPolicy, flow: MeasureFlow, paths: PathBundle,
               terminal: Optional[Callable] = None) -> float:
    """Monte Carlo estimate of the k-period cost of ``policy`` against ``flow``."""
    return float(np.mean(path_costs(problem, policy, flow, paths, terminal)))


def flow_from_trajectories(traj: np.ndarray, horizon: float) -> MeasureFlow:
    k = traj.shape[1] - 1
    return MeasureFlow.uniform(horizon, [EmpiricalMeasure(traj[:, i, :]) for i in range(k + 1)])


def trajectories_csv(traj: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    d = traj.shape[2]
    writer.writerow(["path", "step"] + [f"x{j}" for j in range(d)])
    for p in range(traj.shape[0]):
        for s in range(traj.shape[1]):
            writer.writerow([p, s] + [repr(float(v)) for v in traj[p, s]])
    return buf.getvalue()
