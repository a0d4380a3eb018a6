"""Convergence of discrete-time equilibria as the number of periods grows.

Every ``k`` in a sweep is solved on the same Brownian paths, sampled once on
the reference grid ``k_ref`` and aggregated to coarser grids, and compared to
the ``k_ref`` solution through piecewise-constant controls and flows and the
drift-interpolated state.
"""

from __future__ import annotations

import csv
import io
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bsde import BsdeOptions, solve_mfg_bsde
from .measures import MeasureFlow, wasserstein
from .model import FeedbackPolicy, MfgProblem, PathBundle, sample_paths, simulate_state

log = logging.getLogger(__name__)


@dataclass
class SweepResult:
    ks: np.ndarray
    k_ref: int
    flow_gaps: np.ndarray
    control_gaps: np.ndarray
    state_gaps: np.ndarray
    control_stderr: np.ndarray
    state_stderr: np.ndarray
    converged: np.ndarray
    fitted_slopes: dict = field(default_factory=dict)

    def __post_init__(self):
        ks = np.asarray(self.ks)
        if ks.size > 1 and np.any(np.diff(ks) <= 0):
            raise ValueError("ks must be strictly increasing")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["k", "flow_gap", "control_gap", "state_gap", "control_gap_stderr", "state_gap_stderr",
                    "converged"])
        for j, k in enumerate(self.ks):
            w.writerow([int(k), repr(float(self.flow_gaps[j])), repr(float(self.control_gaps[j])),
                        repr(float(self.state_gaps[j])), repr(float(self.control_stderr[j])),
                        repr(float(self.state_stderr[j])), int(bool(self.converged[j]))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "ks": [int(k) for k in self.ks],
            "k_ref": int(self.k_ref),
            "fitted_slopes": {name: (None if s is None else float(s)) for name, s in self.fitted_slopes.items()},
            "converged": [bool(c) for c in self.converged],
        }


def fit_rate(ks: Sequence[float], gaps: Sequence[float]) -> float:
    """Least-squares slope of ``log(gap)`` against ``log(k)``."""
    ks = np.asarray(ks, float)
    gaps = np.asarray(gaps, float)
    if ks.size != gaps.size:
        raise ValueError("ks and gaps differ in length")
    if ks.size < 3:
        raise ValueError("at least 3 points are needed to fit a rate")
    if np.any(gaps <= 0) or np.any(ks <= 0):
        raise ValueError("gaps and ks must be positive")
    lx, ly = np.log(ks), np.log(gaps)
    lx = lx - lx.mean()
    return float(np.sum(lx * (ly - ly.mean())) / np.sum(lx * lx))


@dataclass(eq=False)
class _Solved:
    problem: MfgProblem
    policy: FeedbackPolicy
    flow: MeasureFlow
    paths: PathBundle
    converged: bool
    traj: Optional[np.ndarray] = None
    actions: Optional[np.ndarray] = None

    def simulate(self):
        if self.traj is None:
            traj = simulate_state(self.problem, self.policy, self.flow, self.paths)[:, :, 0]
            acts = np.stack([self.policy(i, traj[:, i]) for i in range(self.paths.k)], axis=1)
            self.traj, self.actions = traj, acts
        return self.traj, self.actions


def compare_to_reference(sol: _Solved, ref: _Solved) -> dict:
    """Gaps of a coarse solution against the reference on the reference grid."""
    k, k_ref = sol.paths.k, ref.paths.k
    if k_ref % k:
        raise ValueError("reference grid must refine the coarse grid")
    r = k_ref // k
    T = ref.problem.horizon_T
    d_ref = T / k_ref
    x_ref, a_ref = ref.simulate()
    x_k, a_k = sol.simulate()
    n = x_ref.shape[0]
    ctrl = np.zeros(n)
    sup = np.zeros(n)
    flow_gap = 0.0
    for j in range(k_ref + 1):
        i = min(j // r, k - 1) if j < k_ref else k
        if j < k_ref:
            ctrl += (a_k[:, i] - a_ref[:, j]) ** 2 * d_ref
        if j == k_ref or j % r == 0:
            xhat = x_k[:, j // r]
        else:
            b = sol.problem.drift(x_k[:, i], a_k[:, i], sol.flow[i])
            xhat = x_k[:, i] + b * (j - i * r) * d_ref
        sup = np.maximum(sup, (xhat - x_ref[:, j]) ** 2)
        m_hat = sol.flow[i] if j < k_ref else sol.flow[k]
        flow_gap = max(flow_gap, wasserstein(m_hat, ref.flow[j], p=2.0))
    se = lambda v: float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return {"flow_gap": flow_gap, "control_gap": float(np.mean(ctrl)), "state_gap": float(np.mean(sup)),
            "control_stderr": se(ctrl), "state_stderr": se(sup)}


# populated before forking workers; a problem's closures are not picklable
_WORK: dict = {}


def _solve_one(k: int):
    problem, fine, opts = _WORK["problem"], _WORK["paths"], _WORK["opts"]
    pk = problem.replace(periods_k=k)
    policy, flow, report = solve_mfg_bsde(pk, opts, paths=fine.coarsen(k))
    return list(policy.maps), flow, report.converged


def donsker_sweep(problem: MfgProblem, ks: Sequence[int], k_ref: int, opts: BsdeOptions = BsdeOptions(),
                  n_paths: Optional[int] = None, seed: Optional[int] = None, workers: int = 1,
                  paths: Optional[PathBundle] = None) -> SweepResult:
    """Solve at every ``k`` and at ``k_ref`` with the backward scheme and measure the gaps.

    ``ks`` must be increasing divisors of ``k_ref`` with ``k_ref >= 8 max(ks)``.
    Non-converged entries are flagged and excluded from the slope fits.
    """
    ks = np.asarray(sorted(int(k) for k in ks))
    if ks.size == 0 or np.any(ks < 1):
        raise ValueError("ks must be positive")
    if k_ref < 8 * ks.max():
        raise ValueError(f"k_ref={k_ref} must be at least 8 * max(ks) = {8 * ks.max()}")
    if np.any(k_ref % ks):
        raise ValueError("every k must divide k_ref so the noise paths nest")
    n_paths = opts.n_paths if n_paths is None else n_paths
    seed = opts.seed if seed is None else seed
    if paths is None:
        paths = sample_paths(problem, n_paths, seed, k=k_ref)
    if paths.k != k_ref:
        raise ValueError("paths must live on the reference grid")

    _WORK.update(problem=problem, paths=paths, opts=opts)
    order = [k_ref] + [int(k) for k in ks]
    try:
        if workers > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                results = list(pool.map(_solve_one, order))
        else:
            results = [_solve_one(k) for k in order]
    finally:
        _WORK.clear()

    def wrap(k, res):
        maps, flow, conv = res
        pk = problem.replace(periods_k=k)
        return _Solved(pk, FeedbackPolicy(maps, pk), flow, paths.coarsen(k), conv)

    ref = wrap(k_ref, results[0])
    if not ref.converged:
        log.warning("reference solve at k=%d did not converge", k_ref)
    rows = []
    for k, res in zip(ks, results[1:]):
        sol = wrap(int(k), res)
        rows.append(compare_to_reference(sol, ref) | {"converged": sol.converged and ref.converged})
        log.info("k=%d gaps %s", k, rows[-1])
    col = lambda name: np.array([r[name] for r in rows])
    result = SweepResult(ks=ks, k_ref=k_ref, flow_gaps=col("flow_gap"), control_gaps=col("control_gap"),
                         state_gaps=col("state_gap"), control_stderr=col("control_stderr"),
                         state_stderr=col("state_stderr"), converged=col("converged").astype(bool))
    ok = result.converged
    for name, gaps in (("flow_gap", result.flow_gaps), ("control_gap", result.control_gaps),
                       ("state_gap", result.state_gaps)):
        valid = ok & (gaps > 0)
        result.fitted_slopes[name] = fit_rate(ks[valid], gaps[valid]) if valid.sum() >= 3 else None
    return result
