import numpy as np
import pytest

from valuestitch import analytic, generator as gen_mod, harness as h, nn, reward as rew_mod, stitch as st

LIN = analytic.LinearReward(np.array([1.0]))


def normal_equations(F, G, ridge):
    """Independent oracle: solve ``(F^T F + ridge I) W^T = F^T G`` directly."""
    return np.linalg.solve(F.T @ F + ridge * np.eye(F.shape[1]), F.T @ G).T


def test_exact_linear_relation_recovered(rng):
    F = rng.standard_normal((300, 6))
    A = rng.standard_normal((4, 6))
    iface = st.fit_interface(F, F @ A.T)
    np.testing.assert_allclose(iface.W, A, atol=1e-8)
    assert iface.fit_loss < 1e-12


def test_fit_matches_normal_equations(rng):
    F, G = rng.standard_normal((200, 5)), rng.standard_normal((200, 3))
    iface = st.fit_interface(F, G)
    W = normal_equations(F, G, st.RIDGE)
    np.testing.assert_allclose(iface.W, W, atol=1e-8)
    assert iface.fit_loss == pytest.approx(np.mean((F @ W.T - G) ** 2), abs=1e-8)


def test_perturbation_increases_loss(rng):
    F, G = rng.standard_normal((200, 5)), rng.standard_normal((200, 3))
    iface = st.fit_interface(F, G)
    for _ in range(20):
        d = rng.standard_normal(iface.W.shape)
        d *= 1e-3 / np.linalg.norm(d)
        assert np.mean((F @ (iface.W + d).T - G) ** 2) > iface.fit_loss


def test_rank_zero_features_rejected(rng):
    with pytest.raises(st.RankError):
        st.lstsq_ridge(np.zeros((10, 3)), rng.standard_normal((10, 2)))
    with pytest.warns(UserWarning):
        res = st.rank_interfaces({1: np.zeros((10, 3)), 2: rng.standard_normal((10, 3))},
                                 {1: rng.standard_normal((10, 2))})
    assert res.best.i == 2 and res.skipped[0][:2] == (1, 1)


def test_ties_go_to_smaller_indices(rng):
    F = rng.standard_normal((50, 4))
    res = st.rank_interfaces({2: F, 1: F.copy()}, {3: F @ np.eye(4), 2: F.copy()})
    assert (res.best.i, res.best.j) == (1, 2)


@pytest.fixture(scope="module")
def probe(bimodal):
    return st.make_probe_set(lambda n, r: bimodal.sample(n, r), 200, np.random.default_rng(2))


def test_full_grid_table(small_gen, small_rew, probe):
    res = st.search_interfaces(small_gen, small_rew, probe)
    assert len(res.table) == 12 and all(np.isfinite(r.fit_loss) for r in res.table)
    assert {(r.i, r.j) for r in res.table} == {(i, j) for i in (1, 2, 3) for j in (1, 2, 3, 4)}
    losses = [r.fit_loss for r in res.table]
    assert losses == sorted(losses)
    one = st.search_interfaces(small_gen, small_rew, probe, [2], [3])
    assert (one.best.i, one.best.j) == (2, 3)
    with pytest.raises(ValueError):
        st.search_interfaces(small_gen, small_rew, probe, [1], [5])


def test_planted_interface_is_selected(small_gen, small_rew, probe, rng):
    F, G = st.collect_features(small_gen, small_rew, probe, [1, 2, 3], [1, 2, 3, 4])
    A = rng.standard_normal((7, F[2].shape[1]))
    G[5] = F[2] @ A.T
    res = st.rank_interfaces(F, G)
    assert (res.best.i, res.best.j) == (2, 5) and res.best.fit_loss < 1e-10


def _svm(small_gen, small_rew, probe, i=2, j=3):
    F, G = st.collect_features(small_gen, small_rew, probe, [i], [j])
    return st.StitchedValueModel.from_interface(small_gen, small_rew, st.fit_interface(F[i], G[j], i, j),
                                                np.random.default_rng(0))


def test_untrained_model_is_affine_splice(small_gen, small_rew, probe, rng):
    svm = _svm(small_gen, small_rew, probe)
    svm, hist = st.train_stitch(svm, None, LIN, st.StitchTrainConfig(steps=0))
    assert hist == []
    z, t = rng.standard_normal((9, 1)), rng.uniform(0, 1, 9)
    hidden = small_gen.features(z, t, 2) @ svm.stitch.Fw.T
    np.testing.assert_allclose(svm.value(z, t), small_rew.net.forward_suffix(hidden, 3)[:, 0], rtol=1e-14)


def test_training_leaves_generator_frozen(small_gen, small_rew, probe, bimodal):
    before = [p.copy() for p in small_gen.params()]
    reward_before = [p.copy() for p in small_rew.net.params()]
    svm = _svm(small_gen, small_rew, probe)
    st.train_stitch(svm, lambda n, r: bimodal.sample(n, r), LIN, st.StitchTrainConfig(steps=20, batch=32))
    for a, b in zip(before, small_gen.params()):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(reward_before, small_rew.net.params()):
        np.testing.assert_array_equal(a, b)


def test_constant_reward_is_learned(small_gen, small_rew, probe, bimodal):
    svm = _svm(small_gen, small_rew, probe)
    const = lambda x: np.full(len(x), 2.0)
    st.train_stitch(svm, lambda n, r: bimodal.sample(n, r), const,
                    st.StitchTrainConfig(steps=6000, batch=128, lr=3e-3, noise="uniform"), np.random.default_rng(4))
    r = np.random.default_rng(1)
    t = r.uniform(0, 1, 2000)
    z = (1 - t)[:, None] * bimodal.sample(2000, r) + t[:, None] * r.standard_normal((2000, 1))
    assert np.sqrt(np.mean((svm.value(z, t) - 2.0) ** 2)) < 0.01


def test_stitch_gradients_match_finite_differences(small_gen, small_rew, probe, rng):
    svm = _svm(small_gen, small_rew, probe)
    svm.stitch.W2[:] = rng.standard_normal(svm.stitch.W2.shape) * 0.3
    z, t = rng.standard_normal((4, 1)), rng.uniform(0.1, 0.9, 4)
    v, tapes = svm.value_tapes(z, t)
    grads, dz = svm.backward(tapes, np.ones_like(v))
    h_ = 1e-6
    for p, g in zip(svm.trainable_params(), grads):
        for k in (0, p.size // 2, p.size - 1):
            old = p.flat[k]
            p.flat[k] = old + h_
            vp = svm.value(z, t).sum()
            p.flat[k] = old - h_
            vm = svm.value(z, t).sum()
            p.flat[k] = old
            assert g.flat[k] == pytest.approx((vp - vm) / (2 * h_), rel=1e-5, abs=1e-8)
    fd = (svm.value(z + h_, t) - svm.value(z - h_, t)) / (2 * h_)
    np.testing.assert_allclose(dz[:, 0], fd, rtol=1e-5, atol=1e-8)


def test_checkpoint_roundtrip(tmp_path, small_gen, small_rew, probe, rng):
    svm = _svm(small_gen, small_rew, probe)
    svm.stitch.W2[:] = rng.standard_normal(svm.stitch.W2.shape)
    gpath, spath = tmp_path / "g.ckpt", tmp_path / "s.ckpt"
    small_gen.save(gpath)
    svm.save(spath, str(gpath))
    back = st.StitchedValueModel.load(spath)
    z, t = rng.standard_normal((5, 1)), rng.uniform(0, 1, 5)
    np.testing.assert_array_equal(back.value(z, t), svm.value(z, t))
    back.save(tmp_path / "s2.ckpt", str(gpath))
    assert spath.read_bytes() == (tmp_path / "s2.ckpt").read_bytes()
    with pytest.raises(nn.CheckpointFormatError):
        st.StitchedValueModel.load(gpath)


def test_interface_width_mismatch_rejected(small_gen, small_rew):
    with pytest.raises(nn.ShapeError):
        st.StitchedValueModel(small_gen, 2, st.StitchLayer(np.zeros((5, 32))), small_rew.net, 3)
    with pytest.raises(IndexError):
        st.StitchedValueModel(small_gen, 9, st.StitchLayer(np.zeros((16, 32))), small_rew.net, 3)


def test_noise_level_sampler(rng):
    b = st.sample_noise_level("beta22", 20000, rng)
    assert 0 < b.min() and b.max() < 1 and abs(b.mean() - 0.5) < 0.01 and abs(b.var() - 0.05) < 0.003
    with pytest.raises(ValueError):
        st.sample_noise_level("gamma", 3, rng)


# ------------------------------------------------------------------ estimators


def test_analytic_estimator_delegates(bimodal, rng):
    est = st.make_estimator("analytic", gmm=bimodal, reward=LIN)
    z = rng.standard_normal((6, 1))
    np.testing.assert_array_equal(st.value(est, z, 0.4), analytic.value(bimodal, LIN, 0.4, z))
    t = rng.uniform(0, 0.9, 6)
    expect = [analytic.value(bimodal, LIN, tv, zv[None])[0] for zv, tv in zip(z, t)]
    np.testing.assert_allclose(est.value(z, t), expect, rtol=1e-14)
    std = st.AnalyticEstimator(analytic.single_gaussian([0.0], 1.0), LIN)
    assert st.grad_value(std, np.array([[0.3]]), 0.5)[0, 0] == pytest.approx(1.0)


def test_mc_estimator_converges(bimodal):
    oracle = gen_mod.OracleVelocity(bimodal)
    est = st.MCEstimator(oracle, LIN, n_rollouts=10_000, n_steps=200, rng=np.random.default_rng(6))
    z = np.array([[0.1], [1.0]])
    v, se = est.value_with_stderr(z, 0.6)
    assert np.all(np.abs(v - analytic.value(bimodal, LIN, 0.6, z)) < 3 * se)
    with pytest.raises(st.NonDifferentiableError):
        st.grad_value(est, z, 0.6)


def _differentiable_estimators(small_gen, small_rew, probe, bimodal):
    svm = _svm(small_gen, small_rew, probe)
    svm.stitch.W2[:] = np.random.default_rng(1).standard_normal(svm.stitch.W2.shape) * 0.3
    return [st.StitchEstimator(svm), st.TweedieEstimator(small_gen, small_rew),
            st.TweedieEstimator(small_gen, LIN), st.AnalyticEstimator(bimodal, LIN),
            st.AnalyticEstimator(bimodal, LIN, soft=True)]


def test_gradients_match_own_finite_differences(small_gen, small_rew, probe, bimodal, rng):
    z, t = rng.standard_normal((5, 1)), 0.55
    h_ = 1e-5
    for est in _differentiable_estimators(small_gen, small_rew, probe, bimodal):
        fd = (est.value(z + h_, t) - est.value(z - h_, t)) / (2 * h_)
        np.testing.assert_allclose(st.grad_value(est, z, t)[:, 0], fd, rtol=1e-4, atol=1e-9, err_msg=est.name)


def test_constant_reward_has_zero_gradient(small_gen, bimodal, rng):
    const = analytic.LinearReward(np.zeros(1), 1.5)
    z = rng.standard_normal((4, 1))
    for est in (st.AnalyticEstimator(bimodal, const), st.TweedieEstimator(small_gen, const)):
        np.testing.assert_allclose(est.grad(z, 0.5), 0.0, atol=1e-12)


def test_cost_accounting(small_gen, small_rew, probe):
    svm = _svm(small_gen, small_rew, probe)
    sc, tw = st.StitchEstimator(svm).cost(), st.TweedieEstimator(small_gen, small_rew).cost()
    assert sc.full_evals == 0 and sc.prefix_evals == 1 and tw.full_evals == 1
    assert sc.flops < tw.flops
    mc = st.MCEstimator(small_gen, small_rew, n_rollouts=16, n_steps=100).cost(0.5)
    assert mc.full_evals == 16 * 50
    with pytest.raises(ValueError):
        st.make_estimator("oracle")


@pytest.mark.slow
def test_tweedie_bias_site_against_stitch():
    bundle = h.build_models(h.SCENARIOS["bimodal-1d"])
    sc, z, t = bundle.scenario, np.array([[0.1]]), 0.9
    exact = analytic.value(sc.gmm, sc.reward, t, z)[0]
    err_stitch = abs(st.StitchEstimator(bundle.svm).value(z, t)[0] - exact)
    err_tweedie = abs(st.TweedieEstimator(bundle.gen, bundle.rew).value(z, t)[0] - exact)
    assert err_tweedie > 5 * err_stitch


def test_exact_denoiser_has_no_linear_bias(bimodal):
    # with the oracle velocity the one-step estimate is the posterior mean, exact for linear rewards
    est = st.TweedieEstimator(gen_mod.OracleVelocity(bimodal), LIN)
    z = np.array([[0.1], [1.0]])
    np.testing.assert_allclose(est.value(z, 0.9), analytic.value(bimodal, LIN, 0.9, z), atol=1e-12)
