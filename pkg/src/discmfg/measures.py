"""Empirical probability measures on R^d and the functionals built on them.

Measures are finitely supported weighted particle clouds.  Everything here is
pure: measures are frozen after construction and every operation returns a
new object.
"""

from __future__ import annotations

import csv
import functools
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

WEIGHT_TOL = 1e-12
DEFAULT_P = 2.0
DEFAULT_PROJECTIONS = 64
DEFAULT_PROJECTION_SEED = 20240611


class MeasureError(ValueError):
    """Invalid measure data or incompatible measures."""


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise MeasureError(f"points must be 1-D or 2-D, got shape {arr.shape}")
    return arr


@functools.lru_cache(maxsize=16)
def _uniform_weights(n: int) -> np.ndarray:
    # shared read-only array: flows hold many equal-size clouds
    w = np.full(n, 1.0 / n)
    w.flags.writeable = False
    return w


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Weighted particle cloud ``sum_j w_j delta_{x_j}``.

    ``points`` has shape ``(n, d)``; a flat array is read as ``n`` points in
    one dimension.  ``weights`` defaults to uniform.
    """

    points: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = _as_points(self.points)
        n = pts.shape[0]
        if n < 1:
            raise MeasureError("a measure needs at least one particle")
        uniform = self.weights is None
        if uniform:
            w = _uniform_weights(n)
        else:
            w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != n:
            raise MeasureError(f"{n} points but {w.shape[0]} weights")
        if not np.all(np.isfinite(pts)):
            raise MeasureError("non-finite particle coordinates")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise MeasureError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise MeasureError(f"weights sum to {w.sum()!r}, expected 1")
        pts = pts.copy()
        if not uniform:
            w = w.copy()
        pts.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_samples(cls, samples) -> "EmpiricalMeasure":
        return cls(samples)

    @classmethod
    def normalized(cls, points, weights) -> "EmpiricalMeasure":
        """Build a measure from unnormalized nonnegative weights."""
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if not total > 0:
            raise MeasureError("weights have zero total mass")
        return cls(points, w / total)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.size

    @property
    def values(self) -> np.ndarray:
        """Particle locations, flattened to shape ``(n,)`` in one dimension."""
        return self.points[:, 0] if self.dim == 1 else self.points

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    @property
    def bar(self):
        """Mean as a float in 1-D, as a d-vector otherwise."""
        mu = mean(self)
        return float(mu[0]) if self.dim == 1 else mu

    def fingerprint(self, levels: int = 16, resolution: float = 1e-6) -> tuple:
        """Sorted quantile vector per coordinate, rounded to ``resolution``."""
        qs = (np.arange(levels) + 0.5) / levels
        cols = []
        for j in range(self.dim):
            q = _quantiles(self.points[:, j], self.weights, qs)
            cols.append(np.round(q / resolution).astype(np.int64))
        return (self.dim,) + tuple(int(v) for v in np.concatenate(cols))

    def to_json(self) -> str:
        return json.dumps({"points": self.points.tolist(), "weights": self.weights.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "EmpiricalMeasure":
        obj = json.loads(text)
        return cls(obj["points"], obj["weights"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow([f"x{j}" for j in range(self.dim)] + ["weight"])
        for row, w in zip(self.points, self.weights):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(w))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EmpiricalMeasure":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], [r for r in rows[1:] if r]
        if not header or header[-1] != "weight":
            raise MeasureError("CSV must end with a 'weight' column")
        data = np.array([[float(v) for v in r] for r in body])
        return cls(data[:, :-1], data[:, -1])


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """Measures on the uniform grid ``t_i = i T / k``, ``i = 0..k``."""

    times: np.ndarray
    measures: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        ms = tuple(self.measures)
        if len(ms) != t.shape[0]:
            raise MeasureError("times and measures must have equal length")
        if t.shape[0] < 1 or t[0] != 0.0:
            raise MeasureError("time grid must start at 0")
        if t.shape[0] > 1:
            steps = np.diff(t)
            if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * max(1.0, t[-1]):
                raise MeasureError("time grid must be increasing and uniform")
        t.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "measures", ms)

    @classmethod
    def uniform(cls, horizon: float, measures: Sequence[EmpiricalMeasure]) -> "MeasureFlow":
        k = len(measures) - 1
        return cls(np.linspace(0.0, horizon, k + 1), tuple(measures))

    @property
    def k(self) -> int:
        return len(self.measures) - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def delta(self) -> float:
        return self.horizon / self.k if self.k else 0.0

    def __getitem__(self, i: int) -> EmpiricalMeasure:
        return self.measures[i]

    def __len__(self) -> int:
        return len(self.measures)


def _quantiles(x: np.ndarray, w: np.ndarray, qs: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    xs, cw = x[order], np.cumsum(w[order])
    idx = np.searchsorted(cw, qs, side="left")
    return xs[np.clip(idx, 0, xs.shape[0] - 1)]


def _check_pair(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    if mu.dim != nu.dim:
        raise MeasureError(f"dimension mismatch: {mu.dim} vs {nu.dim}")


def _wp_pow_1d(x: np.ndarray, wx: np.ndarray, y: np.ndarray, wy: np.ndarray, p: float) -> float:
    """``W_p^p`` between two weighted 1-D clouds via the quantile coupling."""
    if x.shape[0] == y.shape[0] and np.all(wx == wx[0]) and np.all(wy == wy[0]):
        d = np.abs(np.sort(x, kind="stable") - np.sort(y, kind="stable"))
        return float(np.mean(d**p))
    ox, oy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    xs, ys = x[ox], y[oy]
    cx, cy = np.cumsum(wx[ox]), np.cumsum(wy[oy])
    cx[-1] = cy[-1] = 1.0
    u = np.union1d(cx, cy)
    du = np.diff(np.concatenate(([0.0], u)))
    # each interval (u_{j-1}, u_j] maps to one atom of each cloud
    ix = np.clip(np.searchsorted(cx, u, side="left"), 0, xs.shape[0] - 1)
    iy = np.clip(np.searchsorted(cy, u, side="left"), 0, ys.shape[0] - 1)
    return float(np.sum(du * np.abs(xs[ix] - ys[iy]) ** p))


def wasserstein(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    p: float = DEFAULT_P,
    n_projections: int = DEFAULT_PROJECTIONS,
    seed: int = DEFAULT_PROJECTION_SEED,
) -> float:
    """Wasserstein distance of order ``p``.

    Exact in one dimension (quantile coupling, including unequal weights).
    For ``d > 1`` this is the sliced distance averaged over ``n_projections``
    random directions drawn from ``seed``.
    """
    if p < 1:
        raise MeasureError("p must be >= 1")
    _check_pair(mu, nu)
    if mu.dim == 1:
        val = _wp_pow_1d(mu.points[:, 0], mu.weights, nu.points[:, 0], nu.weights, p)
        return val ** (1.0 / p)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_projections, mu.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    total = 0.0
    for theta in dirs:
        total += _wp_pow_1d(mu.points @ theta, mu.weights, nu.points @ theta, nu.weights, p)
    return (total / n_projections) ** (1.0 / p)


def mean(mu: EmpiricalMeasure) -> np.ndarray:
    return np.sum(mu.weights[:, None] * mu.points, axis=0)


def moment(mu: EmpiricalMeasure, p: float = DEFAULT_P) -> float:
    """Weighted p-th absolute moment ``||mu||_p^p``."""
    norms = np.linalg.norm(mu.points, axis=1)
    return float(np.sum(mu.weights * norms**p))


def ll_monotonicity_gap(
    U: Callable[[np.ndarray, EmpiricalMeasure], np.ndarray],
    m1: EmpiricalMeasure,
    m2: EmpiricalMeasure,
    return_stderr: bool = False,
):
    """``int (U(x, m1) - U(x, m2)) (m1 - m2)(dx)`` over the union of particles.

    ``U`` is called with an array of states (flat in 1-D) and a measure.  With
    ``return_stderr`` the sampling standard error of the two weighted sums is
    returned as well, treating each cloud as an i.i.d. sample.
    """
    _check_pair(m1, m2)

    def diff(m):
        a = np.asarray(U(m.values, m1), dtype=float).reshape(-1)
        b = np.asarray(U(m.values, m2), dtype=float).reshape(-1)
        with np.errstate(invalid="ignore"):
            d = a - b
        if not np.all(np.isfinite(d)):
            raise MeasureError("U returned non-finite values")
        return d

    d1, d2 = diff(m1), diff(m2)
    s1, s2 = np.sum(m1.weights * d1), np.sum(m2.weights * d2)
    gap = float(s1 - s2)
    if not return_stderr:
        return gap
    var1 = np.sum(m1.weights * (d1 - s1) ** 2)
    var2 = np.sum(m2.weights * (d2 - s2) ** 2)
    n1 = 1.0 / np.sum(m1.weights**2)
    n2 = 1.0 / np.sum(m2.weights**2)
    return gap, float(np.sqrt(var1 / n1 + var2 / n2))


def interpolate_flow(flow: MeasureFlow, t: float) -> EmpiricalMeasure:
    """Left-continuous piecewise-constant interpolation of a measure flow."""
    T = flow.horizon
    if not (0.0 <= t <= T):
        raise MeasureError(f"t={t} outside [0, {T}]")
    if t == T or flow.k == 0:
        return flow.measures[-1]
    i = int(np.searchsorted(flow.times, t, side="right")) - 1
    return flow.measures[min(max(i, 0), flow.k - 1)]


def geodesic_mix(m0: EmpiricalMeasure, m1: EmpiricalMeasure, lam: float) -> EmpiricalMeasure:
    """Point at fraction ``lam`` along the W2 geodesic from ``m0`` to ``m1``.

    One-dimensional clouds are mixed through their quantile functions.  In
    higher dimension the particles are matched by index, which is the natural
    coupling when both clouds come from the same common random numbers.
    """
    _check_pair(m0, m1)
    if lam == 1.0:
        return m1
    if lam == 0.0:
        return m0
    if m0.dim == 1:
        x, y = m0.points[:, 0], m1.points[:, 0]
        if x.shape[0] == y.shape[0] and m0.is_uniform and m1.is_uniform:
            return EmpiricalMeasure((1 - lam) * np.sort(x) + lam * np.sort(y))
        ox, oy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
        cx, cy = np.cumsum(m0.weights[ox]), np.cumsum(m1.weights[oy])
        cx[-1] = cy[-1] = 1.0
        u = np.union1d(cx, cy)
        du = np.diff(np.concatenate(([0.0], u)))
        ix = np.clip(np.searchsorted(cx, u), 0, x.shape[0] - 1)
        iy = np.clip(np.searchsorted(cy, u), 0, y.shape[0] - 1)
        keep = du > 0
        pts = (1 - lam) * x[ox][ix] + lam * y[oy][iy]
        return EmpiricalMeasure.normalized(pts[keep], du[keep])
    if m0.size != m1.size:
        raise MeasureError("index-matched mixing needs equal particle counts")
    return EmpiricalMeasure((1 - lam) * m0.points + lam * m1.points, m0.weights)
