"""Closed-form equilibria of the linear-quadratic and bounded-drift examples.

The LQ game has drift ``b = a``, running cost ``c a^2 + c_L (x - mean m)^2``
and terminal cost ``(x - mean m)^2``.  With period length ``delta`` and
per-period noise variance ``noise_var`` every stage value function is
``q (x - mean m)^2 + r``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LqParams:
    c: float = 1.0
    c_L: float = 1.0
    noise_var: float = 0.25
    xi_mean: float = 0.0
    xi_var: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("control cost c must be positive")
        if self.c_L < 0 or self.noise_var < 0 or self.xi_var < 0 or not self.delta > 0:
            raise ValueError("c_L, noise_var, xi_var must be nonnegative and delta positive")

    @property
    def c_tilde(self) -> float:
        return self.c_L + self.c / (1.0 + self.c)


def lq_single_period(params: LqParams) -> dict:
    """Equilibrium of the one-period LQ game (terminal curvature 1).

    The feedback is ``policy_coeff * (E[xi] - xi)`` and the equilibrium state
    is ``(1 - policy_coeff delta) xi + policy_coeff delta E[xi] + Z``.
    """
    c, dl = params.c, params.delta
    kappa = 1.0 / (c + dl)
    keep = 1.0 - kappa * dl
    return {
        "policy_coeff": kappa,
        "equilibrium_mean": params.xi_mean,
        "equilibrium_var": keep**2 * params.xi_var + params.noise_var,
    }


def lq_two_period(params: LqParams) -> dict:
    c = params.c
    ct = params.c_tilde
    return {
        "g1_curvature": ct,
        "g1_offset": params.noise_var,
        "stage1_coeff": ct / (c + ct),
        "stage2_coeff": 1.0 / (1.0 + c),
    }


def lq_g_recursion(params: LqParams, k: int) -> np.ndarray:
    """Coefficients ``(q_i, r_i)``, ``i = 0..k``, of the stage value functions.

    Backward from ``q_k = 1, r_k = 0``::

        q_{i-1} = c_L delta + c q_i / (c + q_i delta)
        r_{i-1} = r_i + q_i noise_var

    and the stage-``i`` feedback coefficient is ``q_i / (c + q_i delta)``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    c, cl, dl, s2 = params.c, params.c_L, params.delta, params.noise_var
    out = np.empty((k + 1, 2))
    out[k] = (1.0, 0.0)
    for i in range(k, 0, -1):
        q, r = out[i]
        out[i - 1] = (cl * dl + c * q / (c + q * dl), r + q * s2)
    return out


def lq_policy_coeffs(params: LqParams, k: int) -> np.ndarray:
    """Feedback coefficients ``kappa_{t_i}``, ``i = 0..k-1``: ``alpha = kappa (mean - x)``."""
    q = lq_g_recursion(params, k)[1:, 0]
    return q / (params.c + q * params.delta)


def lq_flow_moments(params: LqParams, k: int) -> np.ndarray:
    """Equilibrium ``(mean, var)`` of the pasted LQ flow at ``t_0..t_k``."""
    kap = lq_policy_coeffs(params, k)
    out = np.empty((k + 1, 2))
    out[0] = (params.xi_mean, params.xi_var)
    for i in range(k):
        keep = 1.0 - kap[i] * params.delta
        out[i + 1] = (params.xi_mean, keep**2 * out[i, 1] + params.noise_var)
    return out


def lq_bsde_coeffs(params: LqParams, k: int) -> np.ndarray:
    """Curvatures ``p_i`` of the backward-difference value ``p_i (y - mean)^2 + s_i``.

    This is what the simulation scheme driven by the optimized Hamiltonian
    produces for the LQ game with an unconstrained action set::

        p_k = 1,   p_i = p_{i+1} + delta (c_L - p_{i+1}^2 / c)

    with feedback coefficient ``p_{i+1} / c`` at step ``i``.  It agrees with
    :func:`lq_g_recursion` only up to ``O(delta)``.
    """
    c, cl, dl = params.c, params.c_L, params.delta
    p = np.empty(k + 1)
    p[k] = 1.0
    for i in range(k - 1, -1, -1):
        p[i] = p[i + 1] + dl * (cl - p[i + 1] ** 2 / c)
    return p


def tanh_uniqueness_margin(c: float, scale_k: float) -> float:
    """``c - (k^2 + k)``; positive means the bounded-drift best response is unique."""
    if not (c > 0 and scale_k > 0):
        raise ValueError("c and scale_k must be positive")
    return c - (scale_k**2 + scale_k)
