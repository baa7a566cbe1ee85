import numpy as np
import pytest

from valuestitch import analytic, generator as gen_mod, harness as h, nn


def _cached_generator(name):
    sc = h.SCENARIOS[name]
    root = h.cache_root()
    return sc, h.build_generator(sc, root / sc.digest() if root else None)


def test_zero_steps_leave_model_unchanged(rng):
    model = gen_mod.VelocityModel.init(2, rng, (8, 8))
    before = [p.copy() for p in model.params()]
    _, hist = gen_mod.train_fm(model, lambda n, r: r.standard_normal((n, 2)), gen_mod.FmConfig(steps=0), rng)
    assert hist == []
    for a, b in zip(before, model.params()):
        np.testing.assert_array_equal(a, b)


def test_fm_loss_gradient_matches_finite_differences(rng):
    model = gen_mod.VelocityModel.init(2, rng, (6, 6))
    z0, eps = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    t = rng.uniform(0, 1, 5)
    _, grads = gen_mod.fm_loss_and_grads(model, z0, t, eps)
    p, g = model.params()[0], grads[0]
    h_ = 1e-6
    for k in (0, 3, 7):
        old = p.flat[k]
        p.flat[k] = old + h_
        lp = gen_mod.fm_loss_and_grads(model, z0, t, eps)[0]
        p.flat[k] = old - h_
        lm = gen_mod.fm_loss_and_grads(model, z0, t, eps)[0]
        p.flat[k] = old
        assert g.flat[k] == pytest.approx((lp - lm) / (2 * h_), rel=1e-6, abs=1e-9)


def test_empty_sample(small_gen):
    res = gen_mod.sample(small_gen, gen_mod.SamplerConfig(10), 0)
    assert res.samples.shape == (0, 1) and res.trajectory.shape == (11, 0, 1)


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        gen_mod.SamplerConfig(n_steps=1)
    with pytest.raises(ValueError):
        gen_mod.SamplerConfig(mode="heun")


def test_sampling_is_deterministic(small_gen):
    a = gen_mod.sample(small_gen, gen_mod.SamplerConfig(20, seed=3), 16)
    b = gen_mod.sample(small_gen, gen_mod.SamplerConfig(20, seed=3), 16)
    np.testing.assert_array_equal(a.trajectory, b.trajectory)
    assert a.trajectory.shape == (21, 16, 1)


def test_oracle_ode_reproduces_gaussian_moments():
    mu, cov = np.array([0.5, -1.0]), np.array([[0.6, 0.2], [0.2, 0.4]])
    oracle = gen_mod.OracleVelocity(analytic.single_gaussian(mu, cov))
    n = 10_000
    x = gen_mod.sample(oracle, gen_mod.SamplerConfig(500, "ode", 1), n, keep_trajectory=False).samples
    se_mean = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(x.mean(0) - mu) < 3 * se_mean)
    se_cov = np.sqrt((cov**2 + np.outer(np.diag(cov), np.diag(cov))) / n)
    assert np.all(np.abs(np.cov(x.T) - cov) < 3 * se_cov)


def test_oracle_sde_and_ode_agree_in_distribution(gmm2d):
    oracle = gen_mod.OracleVelocity(gmm2d)
    n = 10_000
    ode = gen_mod.sample(oracle, gen_mod.SamplerConfig(500, "ode", 1), n, keep_trajectory=False).samples
    sde = gen_mod.sample(oracle, gen_mod.SamplerConfig(500, "sde", 2), n, keep_trajectory=False).samples
    assert h.two_sample_distance(ode, sde, rng=np.random.default_rng(0)) < 0.05
    direct = gmm2d.sample(n, np.random.default_rng(3))
    assert h.two_sample_distance(ode, direct, rng=np.random.default_rng(0)) < 0.05


def test_features_splice(small_gen, rng):
    z, t = rng.standard_normal((7, 1)), rng.uniform(0, 1, 7)
    full = small_gen.velocity(z, t)
    np.testing.assert_array_equal(small_gen.features(z, t, small_gen.depth), full)
    for i in range(1, small_gen.depth):
        np.testing.assert_array_equal(small_gen.net.forward_suffix(small_gen.features(z, t, i), i + 1), full)
    with pytest.raises(TypeError):
        gen_mod.OracleVelocity(analytic.bimodal_1d()).features(z, t, 1)


def test_tweedie_denoise(gmm2d, rng, small_gen):
    z = rng.standard_normal((3, 1))
    np.testing.assert_array_equal(gen_mod.tweedie_denoise(small_gen, z, 0.0), z)
    std = gen_mod.OracleVelocity(analytic.single_gaussian([0.0], 1.0))
    assert gen_mod.tweedie_denoise(std, np.array([[0.7]]), 0.5)[0, 0] == pytest.approx(0.7, rel=1e-14)
    oracle = gen_mod.OracleVelocity(gmm2d)
    z2, t = rng.standard_normal((200, 2)) * 2, rng.uniform(0.01, 0.99, 200)
    expected = np.stack([analytic.posterior_mean(gmm2d, tv, zv[None])[0] for zv, tv in zip(z2, t)])
    np.testing.assert_allclose(gen_mod.tweedie_denoise(oracle, z2, t), expected, atol=1e-8)


def test_checkpoint_roundtrip(tmp_path, small_gen, rng):
    path = tmp_path / "g.ckpt"
    small_gen.save(path)
    back = gen_mod.VelocityModel.load(path)
    z = rng.standard_normal((4, 1))
    np.testing.assert_array_equal(back.velocity(z, 0.3), small_gen.velocity(z, 0.3))
    nn.save_checkpoint(tmp_path / "plain.ckpt", small_gen.net)
    with pytest.raises(nn.CheckpointFormatError):
        gen_mod.VelocityModel.load(tmp_path / "plain.ckpt")


@pytest.mark.slow
def test_learned_velocity_matches_analytic_2d():
    sc, model = _cached_generator("bimodal-2d")
    rng = np.random.default_rng(11)
    t = rng.uniform(0.05, 0.95, 500)
    z0, eps = sc.gmm.sample(500, rng), rng.standard_normal((500, 2))
    z = (1 - t)[:, None] * z0 + t[:, None] * eps
    exact = gen_mod.OracleVelocity(sc.gmm).velocity(z, t)
    rel = np.linalg.norm(model.velocity(z, t) - exact, axis=1) / np.linalg.norm(exact, axis=1)
    assert np.median(rel) < 0.10


@pytest.mark.slow
def test_learned_velocity_vanishes_for_standard_normal():
    sc, model = _cached_generator("gaussian-1d")
    rng = np.random.default_rng(12)
    z = rng.standard_normal((2000, 1)) * np.sqrt(0.5)
    assert np.allclose(analytic.velocity(sc.gmm, 0.5, z), 0.0, atol=1e-14)
    assert np.mean(np.abs(model.velocity(z, 0.5))) < 0.05
