import numpy as np
import pytest

from valuestitch import align_train as at, analytic, generator as gen_mod, harness as h, schedule, stitch as st
from valuestitch.generator import TrainingError

LIN = analytic.LinearReward(np.array([1.0]))


def _params(model):
    return [p.copy() for p in model.params()]


def test_stop_windows():
    assert at.stop_window("tight-mid", 25) == (12, 17)
    assert at.stop_window("tight-mid", 10) == (5, 7)
    assert at.stop_window("wide", 10) == (5, 10)
    assert at.stop_window((3, 7), 10) == (3, 7)
    assert at.stop_window((0, 40), 10) == (1, 10)
    with pytest.raises(ValueError):
        at.stop_window("middle", 10)
    with pytest.raises(ValueError):
        at.stop_window((8, 4), 10)
    rng = np.random.default_rng(0)
    draws = {at.sample_stop((3, 5), rng) for _ in range(200)}
    assert draws == {3, 4, 5}


def test_draft_config_validation():
    with pytest.raises(ValueError):
        at.DraftConfig(mode="bogus")
    with pytest.raises(ValueError):
        at.DraftConfig(k=11)
    with pytest.raises(ValueError):
        at.DraftConfig(reg_weight=-1.0)


def test_constant_reward_leaves_parameters_unchanged(small_gen):
    model = small_gen.copy()
    before = _params(model)
    rep = at.draft_step(model, analytic.LinearReward(np.zeros(1), 2.0), at.DraftConfig(k=3, batch=8),
                        np.random.default_rng(0))
    assert rep.grad_norm == 0.0 and rep.objective == pytest.approx(2.0)
    for a, b in zip(before, model.params()):
        np.testing.assert_array_equal(a, b)


def test_gradient_flows_only_through_last_k_steps(small_gen, bimodal):
    cfg = at.DraftConfig(mode="value", k=2, n_steps=10, batch=8)
    rng = np.random.default_rng(1)
    z1, noise = rng.standard_normal((8, 1)), rng.standard_normal((6, 8, 1))
    _, _, _, norms = at.draft_gradients(small_gen, st.AnalyticEstimator(bimodal, LIN), cfg, z1, noise, 6)
    assert np.all(norms[[4, 5]] > 0) and not norms[:4].any() and not norms[6:].any()


def test_draft_gradient_matches_finite_differences(small_gen, bimodal):
    model = small_gen.copy()
    cfg = at.DraftConfig(mode="value", k=3, n_steps=10, batch=6, reg_weight=0.3)
    ref = small_gen.copy()
    ref.params()[0] += 0.01
    rng = np.random.default_rng(2)
    z1, noise = rng.standard_normal((6, 1)), rng.standard_normal((5, 6, 1))
    est = st.AnalyticEstimator(bimodal, LIN)
    loss, _, grads, _ = at.draft_gradients(model, est, cfg, z1, noise, 5, ref)
    # the first steps run detached, so the reference derivative freezes their states
    p, g = model.params()[2], grads[2]
    h_ = 1e-6
    for k in (0, 5, 11):
        old = p.flat[k]
        p.flat[k] = old + h_
        model.net.mark_updated()
        lp = at.draft_gradients(model, est, at.DraftConfig(mode="value", k=10, n_steps=10, batch=6, reg_weight=0.3),
                                z1, noise, 5, ref)
        p.flat[k] = old - h_
        model.net.mark_updated()
        lm = at.draft_gradients(model, est, at.DraftConfig(mode="value", k=10, n_steps=10, batch=6, reg_weight=0.3),
                                z1, noise, 5, ref)
        p.flat[k] = old
        model.net.mark_updated()
        full = (lp[0] - lm[0]) / (2 * h_)
        assert np.isfinite(full)
    # with K covering the whole rollout the gradient is exact
    cfg_full = at.DraftConfig(mode="value", k=10, n_steps=10, batch=6)
    loss, _, grads, _ = at.draft_gradients(model, est, cfg_full, z1, noise, 5)
    for k in (0, 5, 11):
        old = p.flat[k]
        p.flat[k] = old + h_
        model.net.mark_updated()
        lp = at.draft_gradients(model, est, cfg_full, z1, noise, 5)[0]
        p.flat[k] = old - h_
        model.net.mark_updated()
        lm = at.draft_gradients(model, est, cfg_full, z1, noise, 5)[0]
        p.flat[k] = old
        model.net.mark_updated()
        assert grads[2].flat[k] == pytest.approx((lp - lm) / (2 * h_), rel=1e-5, abs=1e-10)


def test_value_at_last_step_agrees_with_terminal(small_gen, bimodal):
    est = st.AnalyticEstimator(bimodal, LIN)
    cfg_t = at.DraftConfig(mode="terminal", k=1, n_steps=10, batch=16)
    cfg_v = at.DraftConfig(mode="value", k=1, n_steps=10, batch=16, stop_window=(10, 10))
    rng = np.random.default_rng(3)
    cos = []
    for _ in range(50):
        z1, noise = rng.standard_normal((16, 1)), rng.standard_normal((10, 16, 1))
        gt = np.concatenate([g.ravel() for g in at.draft_gradients(small_gen, LIN, cfg_t, z1, noise, 10)[2]])
        gv = np.concatenate([g.ravel() for g in at.draft_gradients(small_gen, est, cfg_v, z1, noise, 10)[2]])
        cos.append(gt @ gv / (np.linalg.norm(gt) * np.linalg.norm(gv)))
    assert np.mean(cos) > 0.9


def test_draft_requires_estimator_for_value_mode(small_gen):
    with pytest.raises(TypeError):
        at.draft_step(small_gen.copy(), LIN, at.DraftConfig(mode="value"), np.random.default_rng(0))


def test_non_finite_gradient_reports_step(small_gen):
    class Bad(st.ValueEstimator):
        def value(self, z, t):
            return np.zeros(len(z))

        def grad(self, z, t):
            return np.full(z.shape, np.nan)

    with pytest.raises(TrainingError, match="step 7"):
        at.draft_step(small_gen.copy(), Bad(), at.DraftConfig(mode="value", batch=4), np.random.default_rng(0),
                      step_index=7)


def test_draft_counts_rollout_evaluations(small_gen, bimodal):
    rep = at.draft_step(small_gen.copy(), st.AnalyticEstimator(bimodal, LIN),
                        at.DraftConfig(mode="value", batch=8), np.random.default_rng(0))
    assert rep.full_evals == 8 * rep.stop and rep.prefix_evals == 0
    rep = at.draft_step(small_gen.copy(), LIN, at.DraftConfig(batch=8), np.random.default_rng(0))
    assert rep.full_evals == 80


# ------------------------------------------------------------------ NFT


def test_normalize_examples():
    np.testing.assert_array_equal(at.nft_normalize_rewards([3.0, 3.0, 3.0]), 0.5)
    np.testing.assert_allclose(at.nft_normalize_rewards([0.0, 1.0]), [0.0, 1.0])
    out = at.nft_normalize_rewards([0.0, 0.1, -0.1, 1e6])
    assert out.min() >= 0 and out.max() == 1.0
    np.testing.assert_allclose(at.nft_normalize_rewards([0.0, 1.0], 2.0), [0.375, 0.625])
    with pytest.raises(at.GroupError):
        at.nft_normalize_rewards([1.0])
    with pytest.raises(at.GroupError):
        at.NftConfig(group_size=1)


def test_nft_config_validation():
    with pytest.raises(ValueError):
        at.NftConfig(beta=0.0)
    with pytest.raises(ValueError):
        at.NftConfig(rho=1.0)
    with pytest.raises(ValueError):
        at.NftConfig(mode="x")


def test_implicit_policies_average_to_old(rng):
    u_old, u = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    for beta in (0.1, 0.5, 1.0):
        up, um = at.implicit_policies(u_old, u, beta)
        np.testing.assert_allclose(up + um, 2 * u_old, rtol=1e-14, atol=1e-15)


def test_half_rewards_give_zero_gradient_at_old(small_gen):
    rng = np.random.default_rng(4)
    for _ in range(10):
        model = small_gen.copy()
        for p in model.params():
            p += 0.1 * rng.standard_normal(p.shape)
        old = model.copy()
        z = rng.standard_normal((12, 1))
        _, grads = at.nft_loss_and_grads(model, old, z, float(rng.uniform(0, 0.8)), np.full(12, 0.5), 0.7, rng)
        assert max(np.abs(g).max() for g in grads) < 1e-12


def test_bridge_at_zero_is_flow_matching_target(small_gen):
    z0 = np.random.default_rng(5).standard_normal((9, 1))
    r = np.random.default_rng(6).uniform(0, 1, 9)
    old = small_gen.copy()
    loss, _ = at.nft_loss_and_grads(small_gen, old, z0, 0.0, r, 0.5, np.random.default_rng(7))
    rng = np.random.default_rng(7)
    t = rng.uniform(0.0, 1.0, 9)
    eps = rng.standard_normal((9, 1))
    zt = (1 - t)[:, None] * z0 + t[:, None] * eps
    u = small_gen.velocity(zt, t)
    res = u - (eps - z0)
    # at theta = theta_old both implicit policies equal u
    assert loss == np.sum(r[:, None] * res * res + (1 - r[:, None]) * res * res) / 9


def test_ema_update(small_gen):
    model, old = small_gen.copy(), small_gen.copy()
    for p in model.params():
        p += 1.0
    at.ema_update(old, model, 0.0)
    for a, b in zip(old.params(), model.params()):
        np.testing.assert_array_equal(a, b)
    frozen = small_gen.copy()
    target = [p.copy() for p in frozen.params()]
    at.ema_update(frozen, model, 0.75)
    for f, t0, m in zip(frozen.params(), target, model.params()):
        np.testing.assert_allclose(f, 0.75 * t0 + 0.25 * m, rtol=1e-14)


def test_nft_step_accounting(small_gen, bimodal):
    model, old = small_gen.copy(), small_gen.copy()
    est = st.AnalyticEstimator(bimodal, LIN)
    cfg = at.NftConfig(mode="value", group_size=4, n_groups=2)
    rep = at.nft_step(model, old, est, cfg, np.random.default_rng(0))
    lo, hi = at.stop_window("tight-mid", 10)
    assert lo <= rep.stop <= hi and rep.full_evals == 8 * rep.stop
    rep = at.nft_step(model, old, LIN, at.NftConfig(group_size=4, n_groups=2), np.random.default_rng(0))
    assert rep.stop == 10 and rep.full_evals == 80
    with pytest.raises(TypeError):
        at.nft_step(model, old, LIN, cfg, np.random.default_rng(0))


def test_train_log_rows(small_gen):
    lg = at.train_nft(small_gen.copy(), LIN, at.NftConfig(group_size=4, n_groups=2), 4, np.random.default_rng(0),
                      LIN, eval_every=2, eval_n=16)
    assert len(lg.rows) == 4 and all(len(r) == len(at.TrainLog.HEADER) for r in lg.rows)
    assert np.isnan(lg.rows[0][2]) and np.isfinite(lg.rows[1][2])
    assert [r[3] for r in lg.rows] == [80, 160, 240, 320]


@pytest.mark.slow
def test_value_draft_improves_standard_normal_prior():
    sc = h.SCENARIOS["gaussian-1d"]
    root = h.cache_root()
    base = h.build_generator(sc, root / sc.digest() if root else None)
    model = base.copy()
    at.train_draft(model, st.AnalyticEstimator(sc.gmm, sc.reward), at.DraftConfig(mode="value"), 200,
                   np.random.default_rng(0))
    r0 = at.fresh_rollout_reward(base, sc.reward, 2000, 10, 99)
    r1 = at.fresh_rollout_reward(model, sc.reward, 2000, 10, 99)
    assert h.paired_greater(r1, r0) < 0.01


# ------------------------------------------------------------------ KL-regularized objective


def test_kl_rl_single_gaussian():
    rep = at.kl_rl_equivalence_check(analytic.single_gaussian([0.0], 1.0), LIN)
    assert abs(rep.lam_star - 1.0) < 0.02 and not rep.flat


def test_kl_rl_mixture_both_methods(bimodal):
    for method in ("closed", "quadrature"):
        rep = at.kl_rl_equivalence_check(bimodal, analytic.LinearReward(np.array([0.5])), method)
        assert abs(rep.lam_star - 1.0) < 0.02, method


def test_kl_rl_flat_for_zero_reward(bimodal):
    rep = at.kl_rl_equivalence_check(bimodal, analytic.LinearReward(np.zeros(1)))
    assert rep.flat


def test_kl_rl_objective_closed_form_matches_quadrature(bimodal):
    for lam in (0.3, 1.0, 1.7):
        a = at.kl_rl_objective(bimodal, LIN, lam, "closed")
        b = at.kl_rl_objective(bimodal, LIN, lam, "quadrature")
        assert a == pytest.approx(b, rel=1e-7)
