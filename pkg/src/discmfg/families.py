"""Built-in problem families: ``lq``, ``tanh`` and ``custom-polynomial``."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .analytic import LqParams
from .model import InitialLaw, MfgProblem, NoiseSpec


def _initial(spec: Optional[dict]) -> InitialLaw:
    spec = dict(spec or {})
    return InitialLaw(**spec)


def lq_problem(c: float = 1.0, c_L: float = 1.0, sigma: float = 0.5, T: float = 1.0, k: int = 1,
               action_bounds=(-10.0, 10.0), xi: Optional[dict] = None,
               noise: str = "gaussian_increments") -> MfgProblem:
    """LQ game: ``b = a``, ``L = c a^2 + c_L (x - mean m)^2``, ``G = (x - mean m)^2``."""
    if not c > 0:
        raise ValueError("c must be positive")

    def L0(x, a):
        return c * np.asarray(a) ** 2

    def F(x, m):
        return c_L * (x - m.bar) ** 2

    def G(x, m):
        return (x - m.bar) ** 2

    return MfgProblem(
        dim=1, running_cost_L0=L0, coupling_F=F, terminal_G=G,
        action_low=action_bounds[0], action_high=action_bounds[1], sigma=sigma,
        horizon_T=T, periods_k=k, noise=NoiseSpec(noise), initial=_initial(xi),
        quadratic_control_cost=c, family="lq",
        params={"c": c, "c_L": c_L, "sigma": sigma, "T": T, "k": k},
        applicability={
            "separated_drift": True, "measure_free_drift": True, "bounded_actions": True,
            # (x - mean m)^2 is not Lasry-Lions monotone
            "ll_monotone": False, "rate_theorem": False, "per_period_unique": True,
        },
    )


def lq_params(problem: MfgProblem) -> LqParams:
    """Closed-form parameters matching an ``lq`` family problem."""
    if problem.family != "lq":
        raise ValueError("not an LQ family problem")
    p = problem.params
    sigma = float(p["sigma"])
    return LqParams(c=p["c"], c_L=p["c_L"], noise_var=sigma**2 * problem.delta,
                    xi_mean=problem.initial.expected, xi_var=problem.initial.variance, delta=problem.delta)


def tanh_problem(c: float = 3.0, scale_k: float = 1.0, sigma: float = 0.5, T: float = 1.0, k: int = 1,
                 action_bounds=(-10.0, 10.0), xi: Optional[dict] = None,
                 noise: str = "gaussian_increments") -> MfgProblem:
    """Bounded drift ``b = scale_k tanh(a)``, ``L = c a^2``, ``G = (x - mean m)^2``."""

    def b(x, a, m):
        return scale_k * np.tanh(a)

    def L0(x, a):
        return c * np.asarray(a) ** 2

    def G(x, m):
        return (x - m.bar) ** 2

    return MfgProblem(
        dim=1, running_cost_L0=L0, terminal_G=G, drift_b=b,
        action_low=action_bounds[0], action_high=action_bounds[1], sigma=sigma,
        horizon_T=T, periods_k=k, noise=NoiseSpec(noise), initial=_initial(xi),
        family="tanh", params={"c": c, "scale_k": scale_k, "sigma": sigma, "T": T, "k": k},
        applicability={
            "separated_drift": False, "measure_free_drift": True, "bounded_actions": True,
            "ll_monotone": False, "rate_theorem": False,
            "per_period_unique": bool(c - (scale_k**2 + scale_k) > 0),
        },
    )


def _poly(coeffs, x):
    out = np.zeros_like(np.asarray(x, float))
    for j, cj in enumerate(coeffs):
        if cj:
            out = out + cj * np.asarray(x, float) ** j
    return out


def polynomial_problem(c: float = 1.0, b0=(), f_cross: float = 0.0, f_poly=(), g_cross: float = 0.0,
                       g_poly=(), sigma: float = 0.5, T: float = 1.0, k: int = 1,
                       action_bounds=(-10.0, 10.0), xi: Optional[dict] = None,
                       noise: str = "gaussian_increments") -> MfgProblem:
    """Polynomial coefficients with mean-field interaction through ``x * mean(m)``.

    ``b0(x) = sum b0[j] x^j``, ``L = c a^2 + f_cross x mean(m) + sum f_poly[j] x^j``,
    ``G = g_cross x mean(m) + sum g_poly[j] x^j``.
    """
    if not c > 0:
        raise ValueError("c must be positive")
    b0, f_poly, g_poly = tuple(b0), tuple(f_poly), tuple(g_poly)

    def drift0(x, m):
        return _poly(b0, x)

    def L0(x, a):
        return c * np.asarray(a) ** 2

    def F(x, m):
        return f_cross * x * m.bar + _poly(f_poly, x)

    def G(x, m):
        return g_cross * x * m.bar + _poly(g_poly, x)

    return MfgProblem(
        dim=1, drift_b0=drift0, running_cost_L0=L0, coupling_F=F, terminal_G=G,
        action_low=action_bounds[0], action_high=action_bounds[1], sigma=sigma,
        horizon_T=T, periods_k=k, noise=NoiseSpec(noise), initial=_initial(xi),
        quadratic_control_cost=c, family="custom-polynomial",
        params={"c": c, "b0": list(b0), "f_cross": f_cross, "f_poly": list(f_poly), "g_cross": g_cross,
                "g_poly": list(g_poly), "sigma": sigma, "T": T, "k": k},
        applicability={
            "separated_drift": True, "measure_free_drift": True, "bounded_actions": True,
            # x * mean(m) contributes (mean m1 - mean m2)^2 times the coefficient
            "ll_monotone": bool(f_cross >= 0 and g_cross >= 0),
            "rate_theorem": bool(f_cross >= 0 and g_cross >= 0),
            "per_period_unique": bool(f_cross >= 0 and g_cross >= 0),
        },
    )


FAMILIES = {"lq": lq_problem, "tanh": tanh_problem, "custom-polynomial": polynomial_problem}


def build_problem(spec: dict) -> MfgProblem:
    """Instantiate a problem from a config object ``{"family": ..., <parameters>}``."""
    spec = dict(spec)
    family = spec.pop("family")
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    if "action_bounds" in spec:
        spec["action_bounds"] = tuple(spec["action_bounds"])
    return FAMILIES[family](**spec)
