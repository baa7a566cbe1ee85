import math

import numpy as np
import pytest

from valuestitch import schedule


@pytest.mark.parametrize("t, expected", [(0.0, (1, 0, -1, 1)), (0.3, (0.7, 0.3, -1, 1)), (1.0, (0, 1, -1, 1))])
def test_coeffs(t, expected):
    assert schedule.coeffs(t) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("t, expected", [(0.5, 4.0), (0.0, 0.0), (0.25, 4 / 3)])
def test_sde_diffusion(t, expected):
    assert schedule.sde_diffusion_sq(t) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("t, expected", [(0.5, -3.0), (0.25, -1.0), (0.0, 0.0)])
def test_guidance_coeff(t, expected):
    assert schedule.guidance_coeff(t) == pytest.approx(expected, rel=1e-14)


def test_singular_time_rejected():
    for fn in (schedule.sde_diffusion_sq, schedule.guidance_coeff, schedule.velocity_score_coeff):
        with pytest.raises(schedule.ScheduleError):
            fn(1.0)
    with pytest.raises(schedule.ScheduleError):
        schedule.coeffs(1.2)


def test_bridge_values():
    b = schedule.bridge(0.8, 0.5)
    assert b.alpha_bar == pytest.approx(0.4)
    assert b.sigma_bar == pytest.approx(math.sqrt(0.6))
    b = schedule.bridge(0.6, 0.6)
    assert (b.alpha_bar, b.sigma_bar) == (1.0, 0.0)
    with pytest.raises(schedule.ScheduleError):
        schedule.bridge(0.2, 0.5)


@pytest.mark.parametrize("t", [0.0, 0.13, 0.5, 0.97, 1.0])
def test_bridge_from_zero_is_forward_path(t):
    b = schedule.bridge(t, 0.0)
    a, s, da, ds = schedule.coeffs(t)
    assert (b.alpha_bar, b.sigma_bar) == (a, s)
    assert b.d_alpha_bar == da
    if t > 0:
        assert b.d_sigma_bar == pytest.approx(ds, abs=1e-14)


def test_bridge_derivatives_match_finite_differences():
    h = 1e-6
    for t, tau in [(0.7, 0.2), (0.9, 0.5), (0.4, 0.1)]:
        up, dn, b = schedule.bridge(t + h, tau), schedule.bridge(t - h, tau), schedule.bridge(t, tau)
        assert b.d_alpha_bar == pytest.approx((up.alpha_bar - dn.alpha_bar) / (2 * h), rel=1e-6)
        assert b.d_sigma_bar == pytest.approx((up.sigma_bar - dn.sigma_bar) / (2 * h), rel=1e-6)


def test_bridge_composes_with_forward_marginal():
    # z_tau ~ forward marginal, then the bridge must land on the forward marginal at t
    t, tau, s0 = 0.85, 0.3, 0.7
    a_tau, s_tau, _, _ = schedule.coeffs(tau)
    a_t, s_t, _, _ = schedule.coeffs(t)
    b = schedule.bridge(t, tau)
    var_bridge = b.alpha_bar**2 * (a_tau**2 * s0 + s_tau**2) + b.sigma_bar**2
    assert var_bridge == pytest.approx(a_t**2 * s0 + s_t**2, rel=1e-13)


def test_time_grid():
    g = schedule.time_grid(4)
    np.testing.assert_array_equal(g, [1.0, 0.75, 0.5, 0.25, 0.0])
    with pytest.raises(schedule.ScheduleError):
        schedule.time_grid(0)


def test_sde_step_matches_euler_maruyama():
    # z' = z - h (u - nu^2/2 * score) + sqrt(nu^2 h) xi with score = -((1 - t) u + z) / t
    t, tn = 0.6, 0.55
    h, nu2 = t - tn, schedule.sde_diffusion_sq(tn)
    z, u = 0.8, -0.3
    score = -((1 - t) * u + z) / t
    expected = z - h * (u - 0.5 * nu2 * score)
    A, B, C = schedule.sde_step_coeffs(t, tn)
    assert A * z + B * u == pytest.approx(expected, rel=1e-14)
    assert C == pytest.approx(math.sqrt(nu2 * h), rel=1e-14)
    with pytest.raises(schedule.ScheduleError):
        schedule.sde_step_coeffs(0.5, 0.6)
