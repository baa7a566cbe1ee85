"""Time coefficients of the flow-matching path, its sampling SDE and bridges.

The interpolation is ``z_t = alpha_t z_0 + sigma_t eps`` with
``alpha_t = 1 - t`` and ``sigma_t = t``. Sampling runs from ``t = 1`` (pure
noise) to ``t = 0`` (data).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Floor on the bridge noise scale when dividing by it.
BRIDGE_EPS = 1e-12


class ScheduleError(ValueError):
    """Raised for times outside the domain of a coefficient."""


def _check_time(t: float, *, allow_one: bool = True) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0) or math.isnan(t):
        raise ScheduleError(f"time {t!r} outside [0, 1]")
    if not allow_one and t >= 1.0:
        raise ScheduleError("coefficient is singular at t = 1")
    return t


def coeffs(t: float) -> tuple[float, float, float, float]:
    """Return ``(alpha, sigma, d_alpha, d_sigma)`` at time ``t``."""
    t = _check_time(t)
    return 1.0 - t, t, -1.0, 1.0


def alpha(t: float) -> float:
    return coeffs(t)[0]


def sigma(t: float) -> float:
    return coeffs(t)[1]


def sde_diffusion_sq(t: float) -> float:
    """Squared diffusion ``nu_t^2 = 4t / (1 - t)`` of the marginal-preserving SDE."""
    t = _check_time(t, allow_one=False)
    return 4.0 * t / (1.0 - t)


def reversal_diffusion_sq(t: float) -> float:
    """Squared diffusion ``2t / (1 - t)`` of the exact time reversal of the forward path.

    Only with this noise level does a reverse run started at a fixed ``z_t``
    draw from the posterior ``p(z_0 | z_t)``; larger levels keep the
    marginals but not the conditionals.
    """
    t = _check_time(t, allow_one=False)
    return 2.0 * t / (1.0 - t)


def guidance_coeff(t: float) -> float:
    """Coefficient multiplying the value gradient in the tilted SDE drift.

    Equals ``(nu_tilde^2 - nu^2) / 2 = -3t / (1 - t)`` for the FM schedule.
    """
    t = _check_time(t, allow_one=False)
    return -3.0 * t / (1.0 - t)


def velocity_score_coeff(t: float) -> float:
    """``nu_tilde_t^2 / 2 = -t / (1 - t)``, the score coefficient inside the velocity."""
    t = _check_time(t, allow_one=False)
    return -t / (1.0 - t)


@dataclass(frozen=True)
class BridgeCoeffs:
    alpha_bar: float
    sigma_bar: float
    d_alpha_bar: float
    d_sigma_bar: float


def bridge(t: float, tau: float) -> BridgeCoeffs:
    """Coefficients of ``z_t = alpha_bar z_tau + sigma_bar eps`` for ``t >= tau``.

    The derivatives are taken with respect to ``t`` at fixed ``tau``.
    """
    t = _check_time(t)
    tau = _check_time(tau, allow_one=False)
    if t < tau:
        raise ScheduleError(f"bridge requires t >= tau, got t={t}, tau={tau}")
    a_t, s_t, _, _ = coeffs(t)
    a_tau, s_tau, _, _ = coeffs(tau)
    a_bar = a_t / a_tau
    var = s_t * s_t - a_bar * a_bar * s_tau * s_tau
    s_bar = math.sqrt(max(var, 0.0))
    da_bar = -1.0 / a_tau
    # d/dt of sigma_bar^2 / 2 = sigma_t * d_sigma_t - a_bar * da_bar * sigma_tau^2
    num = s_t - a_bar * da_bar * s_tau * s_tau
    if s_bar > 0.0:
        ds_bar = num / s_bar
    else:
        # one-sided limit as t -> tau+: sigma_bar ~ sqrt(2 c (t - tau)), derivative
        # diverges unless num = 0; report the floored value
        ds_bar = num / max(s_bar, BRIDGE_EPS)
    return BridgeCoeffs(a_bar, s_bar, da_bar, ds_bar)


def time_grid(n_steps: int, t_start: float = 1.0, t_end: float = 0.0) -> np.ndarray:
    """Uniform decreasing grid ``t_K = t_start > ... > t_0 = t_end`` with ``n_steps`` intervals."""
    if n_steps < 1:
        raise ScheduleError("n_steps must be >= 1")
    _check_time(t_start)
    _check_time(t_end)
    if t_end > t_start:
        raise ScheduleError("grid must decrease")
    return np.linspace(t_start, t_end, n_steps + 1)


def sde_step_coeffs(t: float, t_next: float, reversal: bool = False) -> tuple[float, float, float]:
    """Affine Euler-Maruyama step ``z' = A z + B u(z, t) + C xi`` from ``t`` down to ``t_next``.

    The score is recovered from the velocity at the upper time ``t`` and the
    squared diffusion is evaluated at the lower time ``t_next`` so that the
    first step out of ``t = 1`` stays finite. ``reversal=True`` uses
    :func:`reversal_diffusion_sq` in place of the sampler's default level.
    """
    t = _check_time(t)
    t_next = _check_time(t_next, allow_one=False)
    h = t - t_next
    if h <= 0.0:
        raise ScheduleError("SDE steps must decrease in time")
    nu_sq = reversal_diffusion_sq(t_next) if reversal else sde_diffusion_sq(t_next)
    # score = -((1 - t) u + z) / t ; drift = u - nu^2/2 * score ; z' = z - h * drift
    half = 0.5 * nu_sq / t
    a = 1.0 - h * half
    b = -h * (1.0 + half * (1.0 - t))
    c = math.sqrt(nu_sq * h)
    return a, b, c
