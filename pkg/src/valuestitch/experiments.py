"""Canned experiments, one per acceptance criterion, plus the estimator bias curve."""
from __future__ import annotations

import logging
import tempfile
import time
from pathlib import Path

import numpy as np
from scipy import stats

from . import (align_infer as ai, align_train as at, analytic, generator as gen_mod, harness as h, nn,
               reward as rew_mod, schedule, stitch as st)

log = logging.getLogger(__name__)

SIGMA_GRID = (0.1, 0.25, 0.5, 0.75, 0.9)
BIAS_CURVE_HEADER = ("estimator", "sigma", "mean_abs_error", "ci_low", "ci_high", "n")


def _rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def _fd_jacobian(fn, z, eps=1e-5):
    """Central differences of a batched map ``(n, d) -> (n, k)``: returns ``(n, k, d)``."""
    z = np.asarray(z, dtype=np.float64)
    cols = []
    for k in range(z.shape[1]):
        e = np.zeros_like(z)
        e[:, k] = eps
        cols.append((np.atleast_2d(fn(z + e)) - np.atleast_2d(fn(z - e))) / (2 * eps))
    out = np.stack(cols, axis=-1)
    return out if out.ndim == 3 else out[:, None, :]


def _fd_grad(fn, z, eps=1e-5):
    """Central differences of a batched scalar map ``(n, d) -> (n,)``."""
    z = np.asarray(z, dtype=np.float64)
    g = np.empty_like(z)
    for k in range(z.shape[1]):
        e = np.zeros_like(z)
        e[:, k] = eps
        g[:, k] = (fn(z + e) - fn(z - e)) / (2 * eps)
    return g


def _random_gmm(rng, d: int, k: int) -> analytic.GmmSpec:
    w = rng.dirichlet(np.ones(k) * 2.0)
    w = w / w.sum()
    mu = rng.normal(0.0, 2.0, size=(k, d))
    covs = []
    for _ in range(k):
        a = rng.normal(size=(d, d)) * 0.4
        covs.append(a @ a.T + 0.2 * np.eye(d))
    return analytic.GmmSpec(w, mu, np.array(covs))


# ------------------------------------------------------------------ 1: identities


def exp_identities(sc: h.Scenario, seed: int, report: h.RunReport) -> None:
    rng = h.stream(seed, "harness.identities.0")
    worst = {"tweedie": 0.0, "denoiser": 0.0, "score_velocity": 0.0, "tilted_score": 0.0}
    fd = {"velocity_jacobian": 0.0, "value_grad": 0.0, "soft_value_grad": 0.0, "score_hessian": 0.0}
    for trial in range(12):
        d, k = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        gmm = _random_gmm(rng, d, k)
        rew = analytic.LinearReward(rng.normal(size=d) * 0.7, float(rng.normal()))
        t = float(rng.uniform(0.05, 0.95))
        z = rng.normal(0.0, 2.0, size=(16, d))
        a, s = 1.0 - t, t
        sc_ = analytic.score(gmm, t, z)
        pm = analytic.posterior_mean(gmm, t, z)
        worst["tweedie"] = max(worst["tweedie"], _rel_err((z + s * s * sc_) / a, pm))
        u = analytic.velocity(gmm, t, z)
        worst["denoiser"] = max(worst["denoiser"], _rel_err(z - t * u, pm))
        worst["score_velocity"] = max(worst["score_velocity"],
                                      _rel_err(-z / (1.0 - t) - t / (1.0 - t) * sc_, u))
        tilted_score = analytic.score(analytic.tilted(gmm, rew), t, z)
        worst["tilted_score"] = max(worst["tilted_score"],
                                    _rel_err(sc_ + analytic.soft_value_grad(gmm, rew, t, z), tilted_score))
        fd["velocity_jacobian"] = max(fd["velocity_jacobian"], _rel_err(
            analytic.velocity_jacobian(gmm, t, z), _fd_jacobian(lambda x: analytic.velocity(gmm, t, x), z)))
        fd["score_hessian"] = max(fd["score_hessian"], _rel_err(
            analytic.score_hessian(gmm, t, z), _fd_jacobian(lambda x: analytic.score(gmm, t, x), z)))
        fd["value_grad"] = max(fd["value_grad"], _rel_err(
            analytic.value_grad(gmm, rew, t, z), _fd_grad(lambda x: analytic.value(gmm, rew, t, x), z)))
        fd["soft_value_grad"] = max(fd["soft_value_grad"], _rel_err(
            analytic.soft_value_grad(gmm, rew, t, z), _fd_grad(lambda x: analytic.soft_value(gmm, rew, t, x), z)))
    for name, v in worst.items():
        report.add(f"{name}_max_rel_err", v)
        report.check(f"{name} identity", v < 1e-10, f"{v:.2e}")
    for name, v in fd.items():
        report.add(f"{name}_fd_rel_err", v)
        report.check(f"{name} vs finite differences", v < 1e-5, f"{v:.2e}")

    # implicit-policy mixture and bridge reduction
    u_old, u_th = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    beta = float(rng.uniform(0.05, 1.0))
    up, um = at.implicit_policies(u_old, u_th, beta)
    mix = float(np.max(np.abs(up + um - 2 * u_old)))
    report.add("policy_mixture_err", mix)
    report.check("u+ + u- = 2 u_old", mix < 1e-10, f"{mix:.2e}")
    bridge_err = 0.0
    for t in rng.uniform(0.0, 1.0, size=50):
        b = schedule.bridge(float(t), 0.0)
        bridge_err = max(bridge_err, abs(b.alpha_bar - (1 - t)), abs(b.sigma_bar - t),
                         abs(b.d_alpha_bar + 1.0), abs(b.d_sigma_bar - 1.0))
    report.add("bridge_tau0_err", bridge_err)
    report.check("bridge tau=0 reduction", bridge_err < 1e-10, f"{bridge_err:.2e}")

    # splice identities on a fresh small network pair
    gen = gen_mod.VelocityModel.init(2, rng, (32, 32, 32))
    rnet = nn.Mlp.init([2, 16, 16, 16, 1], rng)
    x = rng.normal(size=(20, 2 + gen_mod.EMBED_DIM))
    full = gen.net.forward(x)[0]
    splice = max(float(np.max(np.abs(gen.net.forward_suffix(gen.net.forward_truncated(x, i), i + 1) - full)))
                 for i in range(1, gen.depth))
    iface = st.StitchInterface(2, 3, rng.normal(size=(16, 32)) * 0.2, 0.0)
    svm = st.StitchedValueModel.from_interface(gen, rew_mod.RewardModel(net=rnet), iface, rng)
    z, tt = rng.normal(size=(20, 2)), rng.uniform(0, 1, size=20)
    hfeat = gen.features(z, tt, 2)
    manual = rnet.forward_suffix(hfeat @ iface.W.T, 3)[:, 0]
    splice = max(splice, float(np.max(np.abs(svm.value(z, tt) - manual))))
    report.add("splice_err", splice)
    report.check("splice identities", splice < 1e-10, f"{splice:.2e}")


# ------------------------------------------------------------------ 2: Jensen + Taylor


TAYLOR_LAMBDAS = (0.02, 0.04, 0.06, 0.08, 0.10, 0.12, 0.14, 0.16)


def taylor_residuals(gmm, rew, t: float, z: np.ndarray, lambdas=TAYLOR_LAMBDAS) -> np.ndarray:
    """``|V_soft(lam r) - lam V(r) - lam^2 Var(r) / 2|`` for each reward scale."""
    v = analytic.value(gmm, rew, t, z)
    var = analytic.reward_variance(gmm, rew, t, z)
    return np.array([abs(float(analytic.soft_value(gmm, rew.scaled(lam), t, z)) - lam * v - 0.5 * lam**2 * var)
                     for lam in lambdas])


def exp_jensen_taylor(sc: h.Scenario, seed: int, report: h.RunReport) -> None:
    rng = h.stream(seed, "harness.jensen.0")
    n_points, worst = 0, np.inf
    while n_points < 10_000:
        d, k = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        gmm = _random_gmm(rng, d, k)
        rew = analytic.LinearReward(rng.normal(size=d), float(rng.normal()))
        t = float(rng.uniform(0.0, 0.99))
        z = rng.normal(0.0, 2.5, size=(500, d))
        gap = analytic.soft_value(gmm, rew, t, z) - analytic.value(gmm, rew, t, z)
        worst = min(worst, float(gap.min()))
        n_points += z.shape[0]
    report.add("jensen_min_gap", worst, n=n_points)
    report.check("soft value >= standard value", worst >= -1e-12, f"min gap {worst:.3e} over {n_points}")

    # a skewed posterior, so the cubic term does not vanish
    gmm = analytic.GmmSpec(np.array([0.3, 0.7]), np.array([[-1.0], [1.5]]), np.array([0.3, 0.3]))
    rew = analytic.LinearReward(np.array([1.0]))
    res = taylor_residuals(gmm, rew, 0.5, np.array([0.2]))
    slope = float(np.polyfit(np.log(TAYLOR_LAMBDAS), np.log(res), 1)[0])
    report.add("taylor_slope", slope)
    report.check("Taylor residual slope 3 +- 0.3", abs(slope - 3.0) <= 0.3, f"slope {slope:.3f}")


# ------------------------------------------------------------------ 3 and 5: stitched value accuracy


def _forward_points(sc, sigma, n, rng):
    z0 = sc.gmm.sample(n, rng)
    return (1.0 - sigma) * z0 + sigma * rng.standard_normal(z0.shape)


def exp_stitch_accuracy(sc: h.Scenario, seed: int, report: h.RunReport) -> None:
    bundle = h.build_models(sc)
    report.counters.update({f"build_{k}_s": v for k, v in bundle.timings.items()})
    rng = h.stream(seed, "harness.stitch_accuracy.0")
    std = sc.reward_std()
    report.add("reward_std", std)
    est = st.StitchEstimator(bundle.svm)
    rows = []
    for sigma in SIGMA_GRID:
        z = _forward_points(sc, sigma, 1000, rng)
        err = est.value(z, sigma) - analytic.value(sc.gmm, sc.reward, sigma, z)
        rmse = float(np.sqrt(np.mean(err**2)))
        bound = (0.1 if sigma <= 0.5 else 0.25) * std
        report.add(f"rmse_sigma_{sigma}", rmse, n=1000, deterministic=False)
        report.check(f"RMSE at sigma={sigma} <= {bound / std:.2f} std", rmse <= bound, f"{rmse:.4f} vs {bound:.4f}")
        rows.append((sigma, rmse / std, "stitch_rmse_over_std"))
    t = rng.uniform(0.0, 1.0, size=1000)
    z0 = sc.gmm.sample(1000, rng)
    z = (1.0 - t)[:, None] * z0 + t[:, None] * rng.standard_normal(z0.shape)
    exact = st.AnalyticEstimator(sc.gmm, sc.reward).value(z, t)
    rho = float(stats.spearmanr(est.value(z, t), exact).statistic)
    report.add("rank_correlation", rho, n=1000, deterministic=False)
    report.check("rank correlation >= 0.95", rho >= 0.95, f"{rho:.4f}")
    report.plot_rows = rows


def exp_estimator_bias(sc: h.Scenario, seed: int, report: h.RunReport) -> None:
    bundle = h.build_models(sc)
    rng = h.stream(seed, "harness.estimator_bias.0")
    sigma = 0.9
    z = _forward_points(sc, sigma, 200, rng)
    exact = analytic.value(sc.gmm, sc.reward, sigma, z)
    errs = {
        "stitch": np.abs(st.StitchEstimator(bundle.svm).value(z, sigma) - exact),
        "tweedie": np.abs(st.TweedieEstimator(bundle.gen, bundle.rew).value(z, sigma) - exact),
    }
    ci = {}
    for name, e in errs.items():
        ci[name] = h.bootstrap_ci(e, rng)
        report.add(f"{name}_mean_abs_error", e.mean(), e.std(ddof=1) / np.sqrt(e.size), e.size, False)
        report.add(f"{name}_ci_low", ci[name][0], deterministic=False)
        report.add(f"{name}_ci_high", ci[name][1], deterministic=False)
    ok = ci["stitch"][1] < ci["tweedie"][0]
    report.check("Stitch < Tweedie at sigma=0.9 with disjoint 95% CIs", ok,
                 f"stitch {ci['stitch']} tweedie {ci['tweedie']}")


def exp_estimator_bias_curve(sc: h.Scenario, seed: int, report: h.RunReport, n_points: int = 200,
                             mc_rollouts: int = 16) -> None:
    bundle = h.build_models(sc)
    rng = h.stream(seed, "harness.estimator_bias_curve.0")
    ests = {
        "stitch": st.StitchEstimator(bundle.svm),
        "tweedie": st.TweedieEstimator(bundle.gen, bundle.rew),
        "mc": st.MCEstimator(bundle.gen, bundle.rew, mc_rollouts, sc.n_steps, h.stream(seed, "stitch.mc.0")),
        "analytic": st.AnalyticEstimator(sc.gmm, sc.reward),
    }
    rows, plot = [], []
    for sigma in SIGMA_GRID:
        z = _forward_points(sc, sigma, n_points, rng)
        exact = analytic.value(sc.gmm, sc.reward, sigma, z)
        for name, est in ests.items():
            e = np.abs(est.value(z, sigma) - exact)
            lo, hi = h.bootstrap_ci(e, rng) if np.ptp(e) > 0 else (float(e.mean()), float(e.mean()))
            rows.append((name, sigma, repr(float(e.mean())), repr(lo), repr(hi), e.size))
            plot.append((sigma, float(e.mean()), name))
            report.add(f"{name}_mae_sigma_{sigma}", e.mean(), e.std(ddof=1) / np.sqrt(e.size), e.size, False)
    report.check("one row per (estimator, sigma)", len(rows) == len(ests) * len(SIGMA_GRID))
    report.curve_rows = rows
    report.plot_rows = plot


# ------------------------------------------------------------------ 4: stage-1 search


def normal_equations_fit(F: np.ndarray, G: np.ndarray, ridge: float = st.RIDGE) -> np.ndarray:
    """Independent route to the ridge least-squares map: solve ``(F^T F + ridge I) W^T = F^T G``."""
    lhs = F.T @ F + ridge * np.eye(F.shape[1])
    return np.linalg.solve(lhs, F.T @ G).T


def exp_stage1_search(sc: h.Scenario, seed: int, report: h.RunReport) -> None:
    bundle = h.build_models(sc)
    rng = h.stream(seed, "harness.stage1.0")
    probe = st.make_probe_set(sc.sampler(), sc.probe_size, rng)
    F, G = st.collect_features(bundle.gen, bundle.rew, probe, range(1, 4), range(1, 5))
    grid = st.rank_interfaces(F, G)
    finite = all(np.isfinite(r.fit_loss) for r in grid.table)
    report.add("grid_rows", len(grid.table))
    report.check("full 3x4 grid fitted", len(grid.table) == 12 and finite, f"{len(grid.table)} rows")

    # plant a reward slice that is an exact linear image of generator layer 2
    A = rng.normal(size=(24, F[2].shape[1])) / np.sqrt(F[2].shape[1])
    planted = dict(G)
    planted[5] = F[2] @ A.T
    res = st.rank_interfaces(F, planted)
    report.add("planted_fit_loss", res.best.fit_loss)
    report.check("planted interface recovered", (res.best.i, res.best.j) == (2, 5) and res.best.fit_loss < 1e-10,
                 f"best ({res.best.i},{res.best.j}) loss {res.best.fit_loss:.2e}")

    # independent normal-equations solver on well-conditioned random features
    worst = 0.0
    for _ in range(5):
        Fr = rng.normal(size=(200, 20))
        Gr = rng.normal(size=(200, 12))
        w1 = st.fit_interface(Fr, Gr).W
        w2 = normal_equations_fit(Fr, Gr)
        worst = max(worst, float(np.max(np.abs(w1 - w2))),
                    float(np.max(np.abs((Fr @ w1.T - Gr) - (Fr @ w2.T - Gr)))))
    report.add("oracle_max_abs_diff", worst)
    report.check("normal-equations oracle agreement 1e-8", worst < 1e-8, f"{worst:.2e}")
    report.plot_rows = [(r.i, r.fit_loss, f"j={r.j}") for r in grid.table]


# ------------------------------------------------------------------ 6: tilted sampling


def exp_tilted_sampling(sc: h.Scenario, seed: int, report: h.RunReport) -> None:
    gmm = analytic.bimodal_1d()
    rew = analytic.LinearReward(np.array([1.0]))
    target = analytic.tilted(gmm, rew)
    rng = h.stream(seed, "align_infer.guided_sample.0")
    cfg = ai.GuidanceConfig(st.AnalyticEstimator(gmm, rew, soft=True), 1.0, gen_mod.SamplerConfig(n_steps=500))
    res = ai.guided_sample(gen_mod.OracleVelocity(gmm), cfg, 10_000, rng, keep_trajectory=False)
    ref = target.sample(10_000, h.stream(seed, "harness.tilted_reference.0"))
    dist = h.two_sample_distance(res.samples, ref, rng=h.stream(seed, "harness.sliced.0"))
    w_hat = float(np.mean(res.samples[:, 0] > 0.0))
    w_star = float(target.weights[np.argmax(target.means[:, 0])])
    report.add("sliced_w1", dist, n=10_000, deterministic=False)
    report.add("tilted_weight_estimate", w_hat, np.sqrt(w_hat * (1 - w_hat) / 10_000), 10_000, False)
    report.add("tilted_weight_exact", w_star)
    report.check("sliced W1 < 0.08", dist < 0.08, f"{dist:.4f}")
    report.check("dominant weight within 0.03", abs(w_hat - w_star) <= 0.03, f"{w_hat:.4f} vs {w_star:.4f}")


# ------------------------------------------------------------------ 7: FK steering


def exp_fk_steering(sc: h.Scenario, seed: int, report: h.RunReport, n_seeds: int = 200) -> None:
    bundle = h.build_models(sc)
    est = st.StitchEstimator(bundle.svm)
    sampler = gen_mod.SamplerConfig(n_steps=sc.n_steps)
    configs = {
        "unguided": ai.FkConfig(4, 1, resample_steps=()),
        "fk_m1": ai.FkConfig(4, 1),
        "fk_m2": ai.FkConfig(4, 2),
    }
    means = {k: [] for k in configs}
    counters = {}
    for s in range(n_seeds):
        run_seed = int(h.stream(seed, f"align_infer.fk_steer.{s}").integers(2**31))
        for name, cfg in configs.items():
            out = ai.fk_steer(bundle.gen, est, cfg, sampler, run_seed)
            means[name].append(float(sc.reward(out.particles).mean()))
            counters[name] = out.counters.as_dict()
    for name, vals in means.items():
        v = np.asarray(vals)
        report.add(f"{name}_mean_reward", v.mean(), v.std(ddof=1) / np.sqrt(v.size), v.size, False)
    p_a = h.paired_greater(means["fk_m1"], means["unguided"])
    p_b = h.paired_greater(means["fk_m2"], means["fk_m1"])
    report.add("p_fk_vs_unguided", p_a, deterministic=False)
    report.add("p_m2_vs_m1", p_b, deterministic=False)
    report.check("FK beats unguided (p < 0.01)", p_a < 0.01, f"p={p_a:.2e}")
    report.check("M=2 >= M=1 at N=4 (p < 0.05)", np.mean(means["fk_m2"]) >= np.mean(means["fk_m1"]) and p_b < 0.05,
                 f"p={p_b:.2e}")
    c_st = est.cost(0.5)
    c_tw = st.TweedieEstimator(bundle.gen, bundle.rew).cost(0.5)
    report.add("stitch_eval_flops", c_st.flops)
    report.add("tweedie_eval_flops", c_tw.flops)
    report.add("stitch_eval_units", c_st.units)
    report.add("tweedie_eval_units", c_tw.units)
    report.counters.update({f"{k}_{c}": v for k, cs in counters.items() for c, v in cs.items()})
    # model-evaluation units; raw flops are reported alongside and can go either way at toy widths
    ok = c_st.units < c_tw.units and c_st.full_evals < c_tw.full_evals
    report.check("Stitch per-evaluation cost below Tweedie", ok,
                 f"{c_st.units:.3f} vs {c_tw.units:.3f} model-equivalents ({c_st.flops:.0f} vs {c_tw.flops:.0f} flops)")


# ------------------------------------------------------------------ 8: training-time gains


def _band_crossing(rows, lower: float):
    for step, _, fresh, full, _ in rows:
        if np.isfinite(fresh) and fresh >= lower:
            return step, full
    return None, None


def exp_training_gains(sc: h.Scenario, seed: int, report: h.RunReport, draft_iters: int = 200,
                       nft_iters: int = 300, eval_every: int = 10, eval_n: int = 2000) -> None:
    sc1 = h.SCENARIOS["bimodal-1d"] if sc.gmm.dim != 1 else sc
    root = h.cache_root()
    base = h.build_generator(sc1, root / sc1.digest() if root else None)
    est = st.AnalyticEstimator(sc1.gmm, sc1.reward)
    n_steps = 10
    eval_seed = int(h.stream(seed, "align_train.eval.0").integers(2**31))
    r0 = at.fresh_rollout_reward(base, sc1.reward, eval_n, n_steps, eval_seed)
    report.add("init_reward", r0.mean(), r0.std(ddof=1) / np.sqrt(eval_n), eval_n, False)

    model = base.copy()
    at.train_draft(model, est, at.DraftConfig(mode="value", k=1), draft_iters, h.stream(seed, "align_train.draft.0"))
    r_d = at.fresh_rollout_reward(model, sc1.reward, eval_n, n_steps, eval_seed)
    p_d = h.paired_greater(r_d, r0)
    report.add("value_draft_reward", r_d.mean(), r_d.std(ddof=1) / np.sqrt(eval_n), eval_n, False)
    report.check("value-DRaFT improves reward (p < 0.01)", p_d < 0.01, f"p={p_d:.2e}")

    logs = {}
    for mode, target in (("terminal", sc1.reward), ("value", est)):
        model = base.copy()
        logs[mode] = at.train_nft(model, target, at.NftConfig(mode=mode), nft_iters,
                                  h.stream(seed, f"align_train.nft_{mode}.0"), sc1.reward, eval_every, eval_n,
                                  eval_seed)
        if mode == "value":
            r_v = at.fresh_rollout_reward(model, sc1.reward, eval_n, n_steps, eval_seed)
        else:
            r_t = at.fresh_rollout_reward(model, sc1.reward, eval_n, n_steps, eval_seed)
    p_v = h.paired_greater(r_v, r0)
    report.add("value_nft_reward", r_v.mean(), r_v.std(ddof=1) / np.sqrt(eval_n), eval_n, False)
    report.add("terminal_nft_reward", r_t.mean(), r_t.std(ddof=1) / np.sqrt(eval_n), eval_n, False)
    report.check("value-NFT improves reward (p < 0.01)", p_v < 0.01, f"p={p_v:.2e}")
    lower = float(r_t.mean() - 1.96 * r_t.std(ddof=1) / np.sqrt(eval_n))
    budget = logs["terminal"].rows[-1][3]
    step, used = _band_crossing(logs["value"].rows, lower)
    frac = used / budget if used is not None else float("inf")
    report.add("terminal_band_lower", lower, deterministic=False)
    report.add("value_nft_budget_fraction", frac, deterministic=False)
    report.add("terminal_nft_full_evals", budget)
    report.check("value-NFT reaches terminal band within 60% compute", frac <= 0.6,
                 f"fraction {frac:.3f} at step {step}")
    report.plot_rows = [(row[3], row[2], mode) for mode, lg in logs.items() for row in lg.rows if np.isfinite(row[2])]


# ------------------------------------------------------------------ 9: KL-RL


def exp_kl_rl(sc: h.Scenario, seed: int, report: h.RunReport) -> None:
    cases = {
        "gaussian": (analytic.single_gaussian([0.0], 1.0), analytic.LinearReward(np.array([1.0]))),
        "mixture": (analytic.bimodal_1d(), analytic.LinearReward(np.array([1.0]))),
    }
    for name, (gmm, rew) in cases.items():
        rep = at.kl_rl_equivalence_check(gmm, rew)
        report.add(f"lambda_star_{name}", rep.lam_star)
        report.check(f"lambda* = 1 on {name}", abs(rep.lam_star - 1.0) < 0.02 and not rep.flat,
                     f"{rep.lam_star:.5f} ({rep.method})")


# ------------------------------------------------------------------ 10: infrastructure


def gradient_checks(rng: np.random.Generator) -> dict:
    """Relative errors of every hand-written backward pass against central differences."""
    out = {}
    net = nn.Mlp.init([3, 7, 5, 2], rng)
    x = rng.normal(size=(6, 3))
    dy = rng.normal(size=(6, 2))
    _, tape = net.forward(x)
    grads, dx = net.backward(tape, dy)
    fd_x = np.einsum("nkd,nk->nd", _fd_jacobian(lambda v: net.forward(v)[0], x), dy)
    out["mlp_input"] = _rel_err(dx, fd_x)
    worst = 0.0
    for p, g in zip(net.params(), grads):
        for idx in list(np.ndindex(p.shape))[:6]:
            old = p[idx]
            p[idx] = old + 1e-6
            hi = float(np.sum(net.forward(x)[0] * dy))
            p[idx] = old - 1e-6
            lo = float(np.sum(net.forward(x)[0] * dy))
            p[idx] = old
            worst = max(worst, abs((hi - lo) / 2e-6 - g[idx]) / max(1.0, abs(g[idx])))
    out["mlp_params"] = worst

    layer = st.StitchLayer(rng.normal(size=(9, 6)), rng)
    layer.W2[...] = rng.normal(size=layer.W2.shape)
    hfeat = rng.normal(size=(5, 6))
    dout = rng.normal(size=(5, 9))
    _, cache = layer.forward(hfeat)
    _, dh = layer.backward(cache, dout)
    fd_h = np.einsum("nkd,nk->nd", _fd_jacobian(lambda v: layer.forward(v)[0], hfeat), dout)
    out["stitch_layer_input"] = _rel_err(dh, fd_h)

    gen = gen_mod.VelocityModel.init(2, rng, (16, 16, 16))
    rnet = nn.Mlp.init([2, 8, 8, 8, 1], rng)
    svm = st.StitchedValueModel.from_interface(gen, rew_mod.RewardModel(net=rnet),
                                               st.StitchInterface(2, 2, rng.normal(size=(8, 16)) * 0.3, 0.0), rng)
    svm.stitch.W2[...] = rng.normal(size=svm.stitch.W2.shape) * 0.3
    z = rng.normal(size=(5, 2))
    t = 0.4
    out["stitched_value_grad"] = _rel_err(svm.grad(z, t), _fd_grad(lambda v: svm.value(v, t), z))
    tw = st.TweedieEstimator(gen, rew_mod.RewardModel(net=rnet))
    out["tweedie_grad"] = _rel_err(tw.grad(z, t), _fd_grad(lambda v: tw.value(v, t), z))
    u, vtape = gen.velocity_tape(z, t)
    dv = rng.normal(size=u.shape)
    _, dz = gen.vjp(vtape, dv)
    fd_v = np.einsum("nkd,nk->nd", _fd_jacobian(lambda v: gen.velocity(v, t), z), dv)
    out["velocity_vjp"] = _rel_err(dz, fd_v)

    # full-window DRaFT gradient against finite differences of the rollout loss
    cfg = at.DraftConfig(mode="terminal", k=3, n_steps=3, batch=4)
    rew = analytic.LinearReward(np.array([1.0, -0.5]))
    z1 = rng.normal(size=(4, 2))
    noise = rng.normal(size=(3, 4, 2))
    _, _, grads, _ = at.draft_gradients(gen, rew, cfg, z1, noise, 3)
    worst = 0.0
    for p, g in zip(gen.params(), grads):
        for idx in list(np.ndindex(p.shape))[:4]:
            old = p[idx]
            p[idx] = old + 1e-6
            gen.net.mark_updated()
            hi = at.draft_gradients(gen, rew, cfg, z1, noise, 3)[0]
            p[idx] = old - 1e-6
            gen.net.mark_updated()
            lo = at.draft_gradients(gen, rew, cfg, z1, noise, 3)[0]
            p[idx] = old
            gen.net.mark_updated()
            worst = max(worst, abs((hi - lo) / 2e-6 - g[idx]) / max(1.0, abs(g[idx])))
    out["draft_params"] = worst
    return out


def _same_arrays(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes()
                                    for x, y in zip(a, b))


def checkpoint_roundtrips(rng: np.random.Generator) -> dict:
    out = {}
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        gen = gen_mod.VelocityModel.init(2, rng, (16, 16, 16))
        opt = nn.AdamW(lr=1e-3)
        for _ in range(3):
            _, grads = gen_mod.fm_loss_and_grads(gen, rng.normal(size=(8, 2)), rng.uniform(size=8),
                                                 rng.normal(size=(8, 2)))
            opt.step(gen.params(), grads)
            gen.net.mark_updated()
        gen.save(tmp / "gen.ckpt", opt)
        gen2 = gen_mod.VelocityModel.load(tmp / "gen.ckpt")
        _, opt2, _ = nn.load_checkpoint(tmp / "gen.ckpt")
        out["generator"] = _same_arrays(gen.params(), gen2.params())
        out["optimizer"] = opt2 is not None and _same_arrays(opt.m + opt.v, opt2.m + opt2.v) \
            and opt2.step_count == opt.step_count
        rew = rew_mod.RewardModel(net=nn.Mlp.init([2, 8, 8, 8, 1], rng))
        rew.save(tmp / "rew.ckpt")
        out["reward"] = _same_arrays(rew.net.params(), rew_mod.RewardModel.load(tmp / "rew.ckpt").net.params())
        svm = st.StitchedValueModel.from_interface(gen, rew, st.StitchInterface(2, 3, rng.normal(size=(8, 16)), 0.0),
                                                   rng)
        svm.save(tmp / "svm.ckpt", str(tmp / "gen.ckpt"))
        svm2 = st.StitchedValueModel.load(tmp / "svm.ckpt")
        out["stitched"] = _same_arrays(svm.stitch.params() + svm.suffix.params(),
                                       svm2.stitch.params() + svm2.suffix.params()) \
            and _same_arrays(svm.gen.params(), svm2.gen.params()) and (svm2.i, svm2.j) == (2, 3)
    return out


def rerun_outputs(seed: int) -> list[np.ndarray]:
    """Deterministic outputs of a short pipeline run; compared byte-for-byte across reruns."""
    sc = h.Scenario("tiny", analytic.GmmSpec(np.array([0.5, 0.5]), np.array([[-2.0, 0.0], [2.0, 0.0]]),
                                             np.array([[0.25, 0.25], [0.25, 0.25]])),
                    analytic.LinearReward(np.array([1.0, 0.5])), gen_hidden=(32, 32, 32), fm_steps=60,
                    reward_steps=60, stitch_steps=40, probe_size=50, n_steps=20, seed=seed)
    gen = h.build_generator(sc, None)
    rew = h.build_reward(sc, None)
    search = st.search_interfaces(gen, rew, st.make_probe_set(sc.sampler(), 50, h.stream(seed, "stitch.probe.0")))
    rng = h.stream(seed, "stitch.train_stitch.0")
    svm = st.StitchedValueModel.from_interface(gen, rew, search.best, rng)
    st.train_stitch(svm, sc.sampler(), rew, st.StitchTrainConfig(steps=40, batch=32), rng)
    fk = ai.fk_steer(gen, st.StitchEstimator(svm), ai.FkConfig(4, 2), gen_mod.SamplerConfig(n_steps=20), seed)
    guided = ai.guided_sample(gen, ai.GuidanceConfig(st.StitchEstimator(svm), 1.0,
                                                     gen_mod.SamplerConfig(n_steps=20)), 8,
                              h.stream(seed, "align_infer.guided_sample.0"))
    model = gen.copy()
    at.train_nft(model, sc.reward, at.NftConfig(n_groups=2, group_size=4), 3, h.stream(seed, "align_train.nft.0"))
    return ([*gen.params(), *rew.net.params(), np.array([r.fit_loss for r in search.table]),
             *svm.trainable_params(), fk.particles, guided.samples, guided.trajectory, *model.params()])


def exp_infrastructure(sc: h.Scenario, seed: int, report: h.RunReport) -> None:
    rng = h.stream(seed, "harness.infrastructure.0")
    for name, err in gradient_checks(rng).items():
        report.add(f"gradcheck_{name}", err)
        report.check(f"gradient check {name}", err < 1e-5, f"{err:.2e}")
    for name, ok in checkpoint_roundtrips(rng).items():
        report.check(f"checkpoint round-trip {name}", ok)
    a, b = rerun_outputs(seed), rerun_outputs(seed)
    report.check("same-seed rerun byte-identical", _same_arrays(a, b), f"{len(a)} arrays compared")


# ------------------------------------------------------------------ registry


ACCEPTANCE = {
    "identities": exp_identities,
    "jensen-taylor": exp_jensen_taylor,
    "stitch-accuracy": exp_stitch_accuracy,
    "stage1-search": exp_stage1_search,
    "estimator-bias": exp_estimator_bias,
    "tilted-sampling": exp_tilted_sampling,
    "fk-steering": exp_fk_steering,
    "training-gains": exp_training_gains,
    "kl-rl": exp_kl_rl,
    "infrastructure": exp_infrastructure,
}
EXPERIMENTS = {**ACCEPTANCE, "estimator-bias-curve": exp_estimator_bias_curve}


def run_experiment(name: str, scenario: h.Scenario | None = None, seed: int = 0, out_dir=None,
                   emit: bool = True) -> h.RunReport:
    """Run a canned experiment and write its CSVs under ``out_dir`` (default: output root / name)."""
    if name == "acceptance-all":
        return run_acceptance(scenario, seed, out_dir, emit)
    if name not in EXPERIMENTS:
        raise h.UnknownExperimentError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    sc = scenario or h.SCENARIOS["bimodal-2d"]
    report = h.RunReport(name, sc.digest(), seed)
    t0 = time.perf_counter()
    EXPERIMENTS[name](sc, seed, report)
    report.wall_clock = time.perf_counter() - t0
    if emit:
        out = Path(out_dir) if out_dir is not None else h.output_root() / name
        h.emit_report(report, out)
        if report.plot_rows:
            report.outputs.append(str(h.write_csv(out / "plot.csv", h.PLOT_HEADER, report.plot_rows)))
        if report.curve_rows:
            report.outputs.append(str(h.write_csv(out / "curve.csv", BIAS_CURVE_HEADER, report.curve_rows)))
    return report


def run_acceptance(scenario=None, seed: int = 0, out_dir=None, emit: bool = True, names=None) -> h.RunReport:
    sc = scenario or h.SCENARIOS["bimodal-2d"]
    summary = h.RunReport("acceptance-all", sc.digest(), seed)
    base = Path(out_dir) if out_dir is not None else h.output_root()
    t0 = time.perf_counter()
    for k, name in enumerate(names or ACCEPTANCE, start=1):
        rep = run_experiment(name, sc, seed, base / name, emit)
        line = rep.summary_line()
        print(f"criterion {k}: {line}", flush=True)
        summary.check(f"{k}:{name}", rep.passed, line)
        summary.add(f"{name}_wall_clock_s", rep.wall_clock, deterministic=False)
    summary.wall_clock = time.perf_counter() - t0
    if emit:
        h.emit_report(summary, base / "acceptance-all")
    return summary
