"""Experiment plumbing: scenarios, seeded streams, reports, CSV output and a model cache."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__, analytic, generator as gen_mod, reward as rew_mod, stitch as st

log = logging.getLogger(__name__)

OUT_ENV = "VALUESTITCH_OUT"
CACHE_ENV = "VALUESTITCH_CACHE"


class UnknownExperimentError(KeyError):
    pass


# ------------------------------------------------------------------ scenarios


@dataclass
class Scenario:
    name: str
    gmm: analytic.GmmSpec
    reward: analytic.LinearReward
    gen_hidden: tuple = (128, 128, 128)
    fm_steps: int = 20_000
    reward_steps: int = 6000
    stitch_steps: int = 20_000
    probe_size: int = 200
    n_steps: int = 100
    seed: int = 0
    checkpoints: dict = field(default_factory=dict)  # role -> path, used instead of training

    def to_dict(self) -> dict:
        return {
            "name": self.name, "gmm": self.gmm.to_dict(), "reward": self.reward.to_dict(),
            "gen_hidden": list(self.gen_hidden), "fm_steps": self.fm_steps,
            "reward_steps": self.reward_steps, "stitch_steps": self.stitch_steps,
            "probe_size": self.probe_size, "n_steps": self.n_steps, "seed": self.seed,
            "checkpoints": dict(self.checkpoints),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        doc = dict(doc)
        base = SCENARIOS[doc["name"]].to_dict() if doc.get("name") in SCENARIOS else {}
        base.update(doc)
        if "gmm" not in base or "reward" not in base:
            raise ValueError("scenario needs 'gmm' and 'reward' (or a known 'name')")
        return cls(
            name=base["name"], gmm=analytic.GmmSpec.from_dict(base["gmm"]),
            reward=analytic.LinearReward.from_dict(base["reward"]),
            gen_hidden=tuple(base.get("gen_hidden", (128, 128, 128))),
            fm_steps=int(base.get("fm_steps", 20_000)), reward_steps=int(base.get("reward_steps", 6000)),
            stitch_steps=int(base.get("stitch_steps", 20_000)), probe_size=int(base.get("probe_size", 200)),
            n_steps=int(base.get("n_steps", 100)), seed=int(base.get("seed", 0)),
            checkpoints=dict(base.get("checkpoints", {})),
        )

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        doc = self.to_dict()
        doc.pop("checkpoints")
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def sampler(self):
        gmm = self.gmm

        def draw(n, rng):
            return gmm.sample(n, rng)

        return draw

    def reward_std(self) -> float:
        """Standard deviation of the reward under the data distribution."""
        g, a = self.gmm, self.reward.a
        mean_k = g.means @ a
        var_k = np.einsum("i,kij,j->k", a, g.covariances, a)
        m = g.weights @ mean_k
        return float(math.sqrt(g.weights @ (var_k + mean_k**2) - m**2))


SCENARIOS = {
    "bimodal-2d": Scenario(
        "bimodal-2d",
        analytic.GmmSpec(np.array([0.5, 0.5]), np.array([[-2.0, 0.0], [2.0, 0.0]]),
                         np.array([[0.25, 0.25], [0.25, 0.25]])),
        analytic.LinearReward(np.array([1.0, 0.5])),
    ),
    "bimodal-1d": Scenario("bimodal-1d", analytic.bimodal_1d(), analytic.LinearReward(np.array([1.0])),
                           fm_steps=8000),
    "gaussian-1d": Scenario("gaussian-1d", analytic.single_gaussian([0.0], 1.0),
                            analytic.LinearReward(np.array([1.0])), fm_steps=4000),
}


def get_scenario(name_or_path: str | None, default: str = "bimodal-2d") -> Scenario:
    if name_or_path is None:
        return SCENARIOS[default]
    if name_or_path in SCENARIOS:
        return SCENARIOS[name_or_path]
    return Scenario.load(name_or_path)


# ------------------------------------------------------------------ randomness


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stream (``module.operation.index``) under a root seed."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))


# ------------------------------------------------------------------ reports


@dataclass
class Metric:
    value: float
    stderr: float = float("nan")
    n: int = 1
    deterministic: bool = True


@dataclass
class Check:
    label: str
    passed: bool
    detail: str = ""


@dataclass
class RunReport:
    name: str
    scenario_digest: str
    seed: int
    metrics: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    wall_clock: float = 0.0
    outputs: list = field(default_factory=list)
    plot_rows: list = field(default_factory=list)  # (x, y, series)
    curve_rows: list = field(default_factory=list)

    @property
    def provenance(self) -> str:
        return f"valuestitch-{__version__}:{self.scenario_digest}:seed={self.seed}"

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, value, stderr=float("nan"), n: int = 1, deterministic: bool = True) -> None:
        self.metrics[name] = Metric(float(value), float(stderr), int(n), deterministic)

    def check(self, label: str, ok: bool, detail: str = "") -> bool:
        self.checks.append(Check(label, bool(ok), detail))
        return bool(ok)

    def values(self) -> dict:
        """Metric values only (used for rerun comparisons)."""
        return {k: m.value for k, m in self.metrics.items()}

    def summary_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        failed = [c.label for c in self.checks if not c.passed]
        tail = f" failed: {', '.join(failed)}" if failed else ""
        return f"[{status}] {self.name} ({self.wall_clock:.1f}s){tail}"

    def to_dict(self) -> dict:
        return {
            "name": self.name, "provenance": self.provenance, "seed": self.seed,
            "metrics": {k: vars(m) for k, m in self.metrics.items()},
            "counters": self.counters, "checks": [vars(c) for c in self.checks],
            "wall_clock": self.wall_clock, "passed": self.passed,
        }


METRICS_HEADER = ("metric", "value", "stderr", "n", "deterministic")
PLOT_HEADER = ("x", "y", "series")


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(row)
    return path


def read_header(path) -> tuple:
    with Path(path).open(newline="") as fh:
        return tuple(next(csv.reader(fh)))


def emit_report(report: RunReport, out_dir) -> None:
    """Write ``metrics.csv`` and ``report.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    rows = [(k, repr(m.value), repr(m.stderr), m.n, int(m.deterministic)) for k, m in report.metrics.items()]
    report.outputs.append(str(write_csv(out_dir / "metrics.csv", METRICS_HEADER, rows)))
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2, default=float))


# ------------------------------------------------------------------ statistics


def two_sample_distance(set_a, set_b, n_projections: int = 64, rng: np.random.Generator | None = None) -> float:
    """Sliced Wasserstein-1: mean 1D W1 over random unit projections."""
    a = np.atleast_2d(np.asarray(set_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(set_b, dtype=np.float64))
    if a.shape[0] == 1 and a.shape[1] > 1 and b.shape[1] == 1:
        a = a.T
    if a.size == 0 or b.size == 0:
        raise ValueError("two_sample_distance needs nonempty sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sets must have the same dimension")
    rng = np.random.default_rng(0) if rng is None else rng
    d = a.shape[1]
    if d == 1:
        return float(stats.wasserstein_distance(a[:, 0], b[:, 0]))
    dirs = rng.standard_normal((n_projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa, pb = a @ dirs.T, b @ dirs.T
    return float(np.mean([stats.wasserstein_distance(pa[:, k], pb[:, k]) for k in range(n_projections)]))


def bootstrap_ci(x, rng: np.random.Generator, n_resamples: int = 2000, level: float = 0.95) -> tuple[float, float]:
    res = stats.bootstrap((np.asarray(x, dtype=np.float64),), np.mean, n_resamples=n_resamples,
                          confidence_level=level, method="percentile", random_state=rng)
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


def paired_greater(a, b) -> float:
    """One-sided paired t-test p-value for ``mean(a) > mean(b)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if np.allclose(a, b):
        return 1.0
    return float(stats.ttest_rel(a, b, alternative="greater").pvalue)


# ------------------------------------------------------------------ model cache


def cache_root() -> Path | None:
    val = os.environ.get(CACHE_ENV)
    if val is None:
        return Path.home() / ".cache" / "valuestitch"
    if val in ("", "0", "off"):
        return None
    return Path(val)


@dataclass
class ModelBundle:
    scenario: Scenario
    gen: gen_mod.VelocityModel
    rew: rew_mod.RewardModel
    search: st.SearchResult
    svm: st.StitchedValueModel
    stitch_history: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


def _search_rows(search: st.SearchResult):
    best = (search.best.i, search.best.j)
    return [(r.i, r.j, repr(r.fit_loss), int((r.i, r.j) == best)) for r in search.table]


INTERFACE_HEADER = ("i", "j", "fit_loss", "selected")


def build_generator(sc: Scenario, cache: Path | None = None) -> gen_mod.VelocityModel:
    if "generator" in sc.checkpoints:
        path = Path(sc.checkpoints["generator"])
        if not path.exists():
            raise FileNotFoundError(f"missing generator checkpoint {path}")
        return gen_mod.VelocityModel.load(path)
    path = cache / "generator.ckpt" if cache else None
    if path is not None and path.exists():
        return gen_mod.VelocityModel.load(path)
    rng = stream(sc.seed, "generator.train_fm.0")
    model = gen_mod.VelocityModel.init(sc.gmm.dim, rng, sc.gen_hidden)
    gen_mod.train_fm(model, sc.sampler(), gen_mod.FmConfig(steps=sc.fm_steps), rng)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        model.save(path, meta={"scenario": sc.digest()})
    return model


def build_reward(sc: Scenario, cache: Path | None = None) -> rew_mod.RewardModel:
    if "reward" in sc.checkpoints:
        path = Path(sc.checkpoints["reward"])
        if not path.exists():
            raise FileNotFoundError(f"missing reward checkpoint {path}")
        return rew_mod.RewardModel.load(path)
    path = cache / "reward.ckpt" if cache else None
    if path is not None and path.exists():
        return rew_mod.RewardModel.load(path)
    rng = stream(sc.seed, "reward.train_reward.0")
    model, _ = rew_mod.train_reward_surrogate(None, sc.reward, sc.gmm.dim,
                                              rew_mod.RewardFitConfig(steps=sc.reward_steps), rng)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        model.save(path, meta={"scenario": sc.digest()})
    return model


def build_models(sc: Scenario, use_cache: bool = True) -> ModelBundle:
    """Train (or load cached) generator, reward surrogate and stitched value model."""
    root = cache_root() if use_cache else None
    cache = root / sc.digest() if root else None
    timings = {}
    t0 = time.perf_counter()
    gen = build_generator(sc, cache)
    timings["generator"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    rew = build_reward(sc, cache)
    timings["reward"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    probe = st.make_probe_set(sc.sampler(), sc.probe_size, stream(sc.seed, "stitch.probe.0"))
    search = st.search_interfaces(gen, rew, probe)
    timings["search"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    svm_path = cache / "stitched.ckpt" if cache else None
    history = []
    if svm_path is not None and svm_path.exists():
        svm = st.StitchedValueModel.load(svm_path, gen)
    else:
        rng = stream(sc.seed, "stitch.train_stitch.0")
        svm = st.StitchedValueModel.from_interface(gen, rew, search.best, rng)
        svm, history = st.train_stitch(svm, sc.sampler(), rew, st.StitchTrainConfig(steps=sc.stitch_steps), rng)
        if svm_path is not None:
            svm.save(svm_path, meta={"scenario": sc.digest()})
            write_csv(cache / "interfaces.csv", INTERFACE_HEADER, _search_rows(search))
    timings["stitch"] = time.perf_counter() - t0
    return ModelBundle(sc, gen, rew, search, svm, history, timings)
