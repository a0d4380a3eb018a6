"""Vectorized bounded minimization used by every best-response computation."""

from __future__ import annotations

from typing import Callable

import numpy as np

INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


class OptimizationError(RuntimeError):
    """The pointwise optimizer hit a non-finite objective or ran out of budget."""


def minimize_scalar_batch(
    f: Callable[[np.ndarray], np.ndarray],
    low: float,
    high: float,
    n: int,
    tol: float = 1e-8,
    grid: int = 65,
    max_iter: int = 200,
) -> np.ndarray:
    """Minimize ``n`` independent scalar objectives over ``[low, high]``.

    ``f`` maps an ``(n,)`` array of trial actions (one per problem) to ``(n,)``
    objective values.  A coarse grid (always containing 0 when feasible)
    locates the best bracket; golden-section search then refines it to
    ``tol``.  Among grid ties the smallest ``|a|`` wins.
    """
    if high - low <= tol:
        return np.full(n, 0.5 * (low + high))
    pts = np.linspace(low, high, grid)
    if low <= 0.0 <= high:
        pts = np.union1d(pts, [0.0])
    vals = np.empty((pts.size, n))
    for j, a in enumerate(pts):
        vals[j] = f(np.full(n, a))
    if not np.all(np.isfinite(vals)):
        raise OptimizationError("non-finite objective on the search grid")
    best = vals.min(axis=0)
    scale = np.maximum(1.0, np.abs(best))
    ties = vals <= best + 1e-12 * scale
    # first tie in order of increasing |a|
    order = np.argsort(np.abs(pts), kind="stable")
    j_best = order[np.argmax(ties[order], axis=0)]
    lo = pts[np.maximum(j_best - 1, 0)]
    hi = pts[np.minimum(j_best + 1, pts.size - 1)]

    c = hi - INVPHI * (hi - lo)
    d = lo + INVPHI * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if np.all(hi - lo <= tol):
            break
        left = fc <= fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        # one fresh evaluation per problem; the surviving interior point is reused
        fresh = np.where(left, hi - INVPHI * (hi - lo), lo + INVPHI * (hi - lo))
        f_fresh = f(fresh)
        if not np.all(np.isfinite(f_fresh)):
            raise OptimizationError("non-finite objective during golden-section search")
        c, d, fc, fd = (np.where(left, fresh, d), np.where(left, c, fresh),
                        np.where(left, f_fresh, fd), np.where(left, fc, f_fresh))
    else:
        raise OptimizationError("golden-section search did not reach tolerance")
    a = 0.5 * (lo + hi)
    # keep the grid point if refinement landed somewhere worse (flat or kinked objectives)
    fa = f(a)
    return np.where(fa <= best, a, pts[j_best])


def minimize_box(
    f: Callable[[np.ndarray], float],
    low: np.ndarray,
    high: np.ndarray,
    tol: float = 1e-8,
    restarts: int = 20,
    seed: int = 0,
    max_iter: int = 500,
) -> np.ndarray:
    """Projected gradient descent with random restarts on a box in ``R^d``.

    Gradients are central finite differences; the best local minimum over the
    restarts (plus the origin) is returned.
    """
    low, high = np.asarray(low, float), np.asarray(high, float)
    d = low.size
    rng = np.random.default_rng(seed)
    starts = [np.clip(np.zeros(d), low, high)] + [rng.uniform(low, high) for _ in range(restarts - 1)]
    h = 1e-6 * np.maximum(1.0, high - low)
    best_a, best_v = None, np.inf
    for a in starts:
        step = 0.1 * float(np.max(high - low))
        v = f(a)
        moved = np.inf
        for _ in range(max_iter):
            g = np.array([(f(np.clip(a + h[i] * e, low, high)) - f(np.clip(a - h[i] * e, low, high))) / (2 * h[i])
                          for i, e in enumerate(np.eye(d))])
            while step > tol:
                trial = np.clip(a - step * g, low, high)
                vt = f(trial)
                if vt < v:
                    moved = np.max(np.abs(trial - a))
                    a, v = trial, vt
                    step *= 1.5
                    break
                step *= 0.5
            else:
                break
            if moved < tol:
                break
        if not np.isfinite(v):
            raise OptimizationError("non-finite objective in projected gradient")
        if v < best_v:
            best_a, best_v = a, v
    return best_a
