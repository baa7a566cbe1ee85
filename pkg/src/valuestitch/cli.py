"""Command-line entry point: ``valuestitch <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import (align_infer as ai, align_train as at, analytic, experiments, generator as gen_mod, harness as h,
               reward as rew_mod, stitch as st)

log = logging.getLogger("valuestitch")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _scenario(args) -> h.Scenario:
    sc = h.get_scenario(getattr(args, "config", None) or getattr(args, "scenario", None))
    if getattr(args, "seed", None) is not None and args.seed != sc.seed:
        sc = h.Scenario.from_dict({**sc.to_dict(), "seed": args.seed})
    return sc


def _load_gen(path):
    if path is None:
        raise SystemExit("error: --gen <checkpoint> is required")
    return gen_mod.VelocityModel.load(path)


def _make_estimator(args, sc: h.Scenario, gen=None) -> st.ValueEstimator:
    kind = args.estimator
    if kind == "analytic":
        return st.AnalyticEstimator(sc.gmm, sc.reward, soft=getattr(args, "soft", False))
    if kind == "stitch":
        if not args.svm:
            raise SystemExit("error: the stitch estimator needs --svm <checkpoint>")
        return st.StitchEstimator(st.StitchedValueModel.load(args.svm, gen))
    rew = rew_mod.RewardModel.load(args.rew) if args.rew else rew_mod.RewardModel(analytic=sc.reward)
    gen = gen if gen is not None else _load_gen(args.gen)
    if kind == "tweedie":
        return st.TweedieEstimator(gen, rew)
    if kind == "mc":
        return st.MCEstimator(gen, rew, args.rollouts, sc.n_steps, h.stream(args.seed, "stitch.mc.0"),
                              soft=getattr(args, "soft", False))
    raise SystemExit(f"error: unknown estimator {kind!r}")


def _sample_rows(samples: np.ndarray, rewards: np.ndarray):
    return [(k, *map(repr, map(float, z)), repr(float(r))) for k, (z, r) in enumerate(zip(samples, rewards))]


def _sample_header(d: int):
    return ("sample", *(f"z_{k}" for k in range(d)), "reward")


# ------------------------------------------------------------------ commands


def cmd_train_flow(args) -> int:
    sc = _scenario(args)
    rng = h.stream(sc.seed, "generator.train_fm.0")
    model = gen_mod.VelocityModel.init(sc.gmm.dim, rng, sc.gen_hidden)
    _, hist = gen_mod.train_fm(model, sc.sampler(), gen_mod.FmConfig(steps=args.steps or sc.fm_steps), rng)
    model.save(args.out, meta={"scenario": sc.digest(), "final_loss": float(np.mean(hist[-100:]))})
    print(f"saved {args.out} (final loss {np.mean(hist[-100:]):.4f})")
    return 0


def cmd_sample(args) -> int:
    gen = _load_gen(args.gen)
    res = gen_mod.sample(gen, gen_mod.SamplerConfig(args.steps, args.mode, args.seed), args.n,
                         keep_trajectory=args.trajectory)
    d = gen.data_dim
    if args.trajectory:
        h.write_csv(args.out, ("chain_id", "step", "t", *(f"z_{k}" for k in range(d))), gen_mod.trajectory_rows(res))
    else:
        h.write_csv(args.out, ("sample", *(f"z_{k}" for k in range(d))),
                    [(k, *map(repr, map(float, z))) for k, z in enumerate(res.samples)])
    print(f"wrote {args.out}")
    return 0


def cmd_train_reward(args) -> int:
    sc = _scenario(args)
    rng = h.stream(sc.seed, "reward.train_reward.0")
    model, rep = rew_mod.train_reward_surrogate(None, sc.reward, sc.gmm.dim,
                                                rew_mod.RewardFitConfig(steps=args.steps or sc.reward_steps), rng)
    model.save(args.out, meta={"scenario": sc.digest(), "max_abs_error": rep.max_abs_error})
    print(f"saved {args.out} (max abs error {rep.max_abs_error:.4g} on [-4, 4]^d)")
    return 0


def cmd_stitch_search(args) -> int:
    sc = _scenario(args)
    gen, rew = _load_gen(args.gen), rew_mod.RewardModel.load(args.rew)
    probe = st.make_probe_set(sc.sampler(), args.probe, h.stream(sc.seed, "stitch.probe.0"))
    res = st.search_interfaces(gen, rew, probe)
    h.write_csv(args.out, h.INTERFACE_HEADER, h._search_rows(res))
    print(f"selected interface i={res.best.i} j={res.best.j} (fit loss {res.best.fit_loss:.4g})")
    return 0


def cmd_stitch_train(args) -> int:
    sc = _scenario(args)
    gen, rew = _load_gen(args.gen), rew_mod.RewardModel.load(args.rew)
    i, j = _ints(args.interface)
    probe = st.make_probe_set(sc.sampler(), args.probe, h.stream(sc.seed, "stitch.probe.0"))
    F, G = st.collect_features(gen, rew, probe, [i], [j])
    iface = st.fit_interface(F[i], G[j], i, j)
    rng = h.stream(sc.seed, "stitch.train_stitch.0")
    svm = st.StitchedValueModel.from_interface(gen, rew, iface, rng)
    svm, hist = st.train_stitch(svm, sc.sampler(), rew, st.StitchTrainConfig(steps=args.epochs), rng)
    svm.save(args.out, str(Path(args.gen).resolve()), meta={"scenario": sc.digest()})
    print(f"saved {args.out} (final loss {np.mean(hist[-100:]) if hist else float('nan'):.4f})")
    return 0


def cmd_eval_value(args) -> int:
    sc = _scenario(args)
    gen = _load_gen(args.gen) if args.gen else None
    est = _make_estimator(args, sc, gen)
    rng = h.stream(sc.seed, "harness.eval_value.0")
    rows = []
    for sigma in _floats(args.sigma_grid):
        z0 = sc.gmm.sample(args.n, rng)
        z = (1.0 - sigma) * z0 + sigma * rng.standard_normal(z0.shape)
        exact = analytic.value(sc.gmm, sc.reward, sigma, z)
        e = np.abs(est.value(z, sigma) - exact)
        lo, hi = h.bootstrap_ci(e, rng) if np.ptp(e) > 0 else (float(e.mean()), float(e.mean()))
        rows.append((est.name, sigma, repr(float(e.mean())), repr(lo), repr(hi), e.size))
    h.write_csv(args.out, experiments.BIAS_CURVE_HEADER, rows)
    print(f"wrote {args.out}")
    return 0


def _cost_rows(counters: ai.Counters):
    return list(counters.as_dict().items())


def cmd_fk_steer(args) -> int:
    sc = _scenario(args)
    gen = _load_gen(args.gen)
    est = _make_estimator(args, sc, gen)
    cfg = ai.FkConfig(args.n, args.m, temperature=args.temperature)
    sampler = gen_mod.SamplerConfig(n_steps=args.steps or sc.n_steps)
    res = ai.fk_steer(gen, est, cfg, sampler, args.seed)
    h.write_csv(args.out, _sample_header(gen.data_dim), _sample_rows(res.particles, sc.reward(res.particles)))
    cost_path = Path(args.out).with_suffix(".cost.csv")
    h.write_csv(cost_path, ("counter", "value"), _cost_rows(res.counters))
    print(f"wrote {args.out} and {cost_path}")
    return 0


def cmd_dps(args) -> int:
    sc = _scenario(args)
    gen = _load_gen(args.gen)
    est = _make_estimator(args, sc, gen)
    cfg = ai.GuidanceConfig(est, args.scale, gen_mod.SamplerConfig(args.steps or sc.n_steps, "sde", args.seed))
    res = ai.guided_sample(gen, cfg, args.n, keep_trajectory=False)
    h.write_csv(args.out, _sample_header(gen.data_dim), _sample_rows(res.samples, sc.reward(res.samples)))
    print(f"wrote {args.out}")
    return 0


def _train_target(args, sc, gen):
    if args.mode == "value":
        return _make_estimator(args, sc, gen.copy())
    return rew_mod.RewardModel.load(args.rew) if args.rew else sc.reward


def cmd_draft(args) -> int:
    sc = _scenario(args)
    gen = _load_gen(args.gen)
    target = _train_target(args, sc, gen)
    cfg = at.DraftConfig(mode=args.mode, k=args.k, stop_window=tuple(_ints(args.stop_window)),
                         reg_weight=args.reg, lr=args.lr)
    lg = at.train_draft(gen, target, cfg, args.iters, h.stream(sc.seed, "align_train.draft.0"), sc.reward,
                        args.eval_every)
    h.write_csv(args.log, at.TrainLog.HEADER, lg.rows)
    gen.save(args.out, meta={"finetune": "draft", "mode": args.mode})
    print(f"saved {args.out}; log {args.log}")
    return 0


def cmd_nft(args) -> int:
    sc = _scenario(args)
    gen = _load_gen(args.gen)
    target = _train_target(args, sc, gen)
    window = tuple(_ints(args.stop_window)) if "," in args.stop_window else args.stop_window
    cfg = at.NftConfig(mode=args.mode, beta=args.beta, rho=args.rho, stop_window=window, lr=args.lr)
    lg = at.train_nft(gen, target, cfg, args.iters, h.stream(sc.seed, "align_train.nft.0"), sc.reward,
                      args.eval_every)
    h.write_csv(args.log, at.TrainLog.HEADER, lg.rows)
    gen.save(args.out, meta={"finetune": "nft", "mode": args.mode})
    print(f"saved {args.out}; log {args.log}")
    return 0


def cmd_run_experiment(args) -> int:
    sc = h.get_scenario(args.config) if args.config else None
    rep = experiments.run_experiment(args.name, sc, args.seed, args.out)
    print(rep.summary_line())
    for c in rep.checks:
        print(f"  [{'ok' if c.passed else 'FAIL'}] {c.label}: {c.detail}")
    return 0 if rep.passed else 1


def cmd_acceptance_all(args) -> int:
    sc = h.get_scenario(args.config) if args.config else None
    rep = experiments.run_acceptance(sc, args.seed, args.out)
    print(rep.summary_line())
    return 0 if rep.passed else 1


# ------------------------------------------------------------------ parser


def _estimator_args(p, default="stitch"):
    p.add_argument("--estimator", choices=["stitch", "tweedie", "mc", "analytic"], default=default)
    p.add_argument("--svm", help="stitched value checkpoint (stitch estimator)")
    p.add_argument("--rew", help="reward checkpoint (tweedie/mc); defaults to the scenario's exact reward")
    p.add_argument("--rollouts", type=int, default=16, help="rollouts per MC estimate")
    p.add_argument("--soft", action="store_true", help="soft value (analytic and mc only)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="valuestitch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--scenario", default=None, help="scenario name or JSON file")
        p.add_argument("--config", default=None, help="JSON scenario file (overrides --scenario)")
        p.add_argument("--seed", type=int, default=None)
        return p

    p = add("train-flow", cmd_train_flow, "train a flow-matching generator")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("sample", cmd_sample, "sample from a generator")
    p.add_argument("--gen", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--mode", choices=list(gen_mod.MODES), default="sde")
    p.add_argument("--trajectory", action="store_true", help="write every step, not just the samples")
    p.add_argument("--out", required=True)

    p = add("train-reward", cmd_train_reward, "fit the MLP reward surrogate")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("stitch-search", cmd_stitch_search, "rank stitching interfaces by linear fit loss")
    p.add_argument("--gen", required=True)
    p.add_argument("--rew", required=True)
    p.add_argument("--probe", type=int, default=200)
    p.add_argument("--out", required=True)

    p = add("stitch-train", cmd_stitch_train, "train a stitched value model at an interface")
    p.add_argument("--gen", required=True)
    p.add_argument("--rew", required=True)
    p.add_argument("--interface", required=True, help="i,j")
    p.add_argument("--epochs", type=int, default=20_000, help="optimizer steps")
    p.add_argument("--probe", type=int, default=200)
    p.add_argument("--out", required=True)

    p = add("eval-value", cmd_eval_value, "value-estimate error against the exact value")
    _estimator_args(p)
    p.add_argument("--gen")
    p.add_argument("--sigma-grid", default="0.1,0.25,0.5,0.75,0.9")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--out", required=True)

    p = add("fk-steer", cmd_fk_steer, "FK steering with optional proposal scaling")
    _estimator_args(p)
    p.add_argument("--gen", required=True)
    p.add_argument("--n", type=int, default=4, help="particles")
    p.add_argument("--m", type=int, default=1, help="proposals per particle")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = add("dps", cmd_dps, "value-gradient guided sampling")
    _estimator_args(p)
    p.add_argument("--gen", required=True)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)

    for name, fn in (("draft", cmd_draft), ("nft", cmd_nft)):
        p = add(name, fn, f"{name.upper()} finetuning")
        _estimator_args(p, default="analytic")
        p.add_argument("--gen", required=True)
        p.add_argument("--mode", choices=["terminal", "value"], default="terminal")
        p.add_argument("--iters", type=int, default=200)
        p.add_argument("--lr", type=float, default=1e-4)
        p.add_argument("--eval-every", type=int, default=10)
        p.add_argument("--out", required=True, help="finetuned generator checkpoint")
        p.add_argument("--log", required=True, help="per-step CSV log")
        if name == "draft":
            p.add_argument("--k", type=int, default=1)
            p.add_argument("--stop-window", default="3,7")
            p.add_argument("--reg", type=float, default=0.0)
        else:
            p.add_argument("--beta", type=float, default=0.5)
            p.add_argument("--rho", type=float, default=0.9)
            p.add_argument("--stop-window", default="tight-mid", help="a,b or a preset name")

    p = sub.add_parser("run-experiment", help="run one canned experiment")
    p.set_defaults(func=cmd_run_experiment)
    p.add_argument("name", help="experiment name, or acceptance-all")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("acceptance-all", help="run every acceptance experiment; exit 1 on any failure")
    p.set_defaults(func=cmd_acceptance_all)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "seed", 0) is None:
        args.seed = h.get_scenario(args.config or args.scenario).seed
    try:
        return int(args.func(args) or 0)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
