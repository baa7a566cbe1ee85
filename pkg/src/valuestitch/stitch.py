"""Stitched value models: interface search, stitching layer, value regression.

A stitched value model evaluates ``r^{>=j}(s(u^{<=i}(z_t, t)))``: the frozen
generator prefix up to layer ``i`` produces noise-aware features, a stitching
layer ``s`` maps them into the input space of reward layer ``j``, and the
reward suffix finishes the computation.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import analytic, generator as gen_mod, kernels, nn
from .generator import TrainingError, VelocityModel
from .reward import RewardModel

log = logging.getLogger(__name__)

RIDGE = 1e-8
MAX_REWARD_SLICE = 4
BOTTLENECK_RATIO = 8


class RankError(np.linalg.LinAlgError):
    pass


class NonDifferentiableError(TypeError):
    pass


# ------------------------------------------------------------------ stage 1


@dataclass
class ProbeSet:
    z0: np.ndarray
    t: np.ndarray
    eps: np.ndarray

    @property
    def zt(self) -> np.ndarray:
        return (1.0 - self.t)[:, None] * self.z0 + self.t[:, None] * self.eps

    def __len__(self) -> int:
        return self.z0.shape[0]


def make_probe_set(data_sampler, n: int, rng: np.random.Generator) -> ProbeSet:
    """``n`` triples ``(z_0, t, eps)`` with ``t ~ U[0, 1]``."""
    z0 = np.asarray(data_sampler(n, rng), dtype=np.float64)
    t = rng.uniform(0.0, 1.0, size=n)
    eps = rng.standard_normal(z0.shape)
    return ProbeSet(z0, t, eps)


@dataclass
class StitchInterface:
    i: int
    j: int
    W: np.ndarray  # (reward feature dim, generator feature dim)
    fit_loss: float


def lstsq_ridge(F: np.ndarray, G: np.ndarray, ridge: float = RIDGE) -> np.ndarray:
    """``W`` minimizing ``||F W^T - G||^2 + ridge ||W||^2`` for row-stacked features.

    Solved through the SVD of ``F`` (a ridge-floored pseudoinverse).
    """
    if F.shape[0] != G.shape[0]:
        raise nn.ShapeError("feature matrices must have the same number of rows")
    u, s, vt = np.linalg.svd(F, full_matrices=False)
    if s.size == 0 or s[0] <= np.finfo(float).tiny:
        raise RankError("probe features have rank 0")
    filt = s / (s * s + ridge)
    wt = vt.T @ (filt[:, None] * (u.T @ G))
    return wt.T


def fit_interface(F: np.ndarray, G: np.ndarray, i: int = 0, j: int = 0, ridge: float = RIDGE) -> StitchInterface:
    """Closed-form linear feature matching between paired feature batches."""
    W = lstsq_ridge(F, G, ridge)
    resid = F @ W.T - G
    return StitchInterface(i, j, W, float(np.mean(resid * resid)))


def collect_features(gen: VelocityModel, rew: RewardModel, probe: ProbeSet, i_range, j_range):
    """Cache generator features of ``z_t`` and reward features of ``z_0`` for each index."""
    zt = probe.zt
    F = {i: gen.features(zt, probe.t, i) for i in i_range}
    G = {j: rew.features(probe.z0, j) for j in j_range}
    return F, G


@dataclass
class SearchResult:
    table: list  # StitchInterface, ascending fit_loss
    best: StitchInterface
    skipped: list = field(default_factory=list)  # (i, j, reason)


def rank_interfaces(F: dict, G: dict, ridge: float = RIDGE) -> SearchResult:
    """Fit every ``(i, j)`` pair and rank by loss; ties go to smaller ``i`` then ``j``."""
    table, skipped = [], []
    for i in sorted(F):
        for j in sorted(G):
            try:
                table.append(fit_interface(F[i], G[j], i, j, ridge))
            except RankError as exc:
                warnings.warn(f"interface ({i}, {j}) skipped: {exc}", stacklevel=2)
                skipped.append((i, j, str(exc)))
    if not table:
        raise RankError("no interface could be fitted")
    table.sort(key=lambda r: (r.fit_loss, r.i, r.j))
    return SearchResult(table, table[0], skipped)


def search_interfaces(gen: VelocityModel, rew: RewardModel, probe: ProbeSet, i_range=None, j_range=None,
                      ridge: float = RIDGE) -> SearchResult:
    i_range = list(range(1, gen.depth)) if i_range is None else list(i_range)
    j_range = list(range(1, min(rew.depth, MAX_REWARD_SLICE) + 1)) if j_range is None else list(j_range)
    if not i_range or not j_range:
        raise ValueError("empty search range")
    if max(j_range) > MAX_REWARD_SLICE:
        raise ValueError(f"reward slice index capped at {MAX_REWARD_SLICE}")
    F, G = collect_features(gen, rew, probe, i_range, j_range)
    return rank_interfaces(F, G, ridge)


# ------------------------------------------------------------------ stitch layer


class StitchLayer:
    """``x + G(x)`` with ``x = F h``: an affine map plus a zero-initialized residual.

    ``G = W2 silu(W1 silu(x) + b1) + b2`` with a 1:8 bottleneck; ``W2`` and
    ``b2`` start at zero so the layer is exactly affine before training.
    """

    def __init__(self, W: np.ndarray, rng: np.random.Generator | None = None, hidden: int | None = None):
        W = np.asarray(W, dtype=np.float64)
        out_dim, in_dim = W.shape
        hidden = hidden or max(1, math.ceil(out_dim / BOTTLENECK_RATIO))
        rng = np.random.default_rng(0) if rng is None else rng
        self.Fw = W.copy()
        self.Fb = np.zeros(out_dim)
        self.W1 = rng.standard_normal((hidden, out_dim)) * math.sqrt(1.0 / out_dim)
        self.b1 = np.zeros(hidden)
        self.W2 = np.zeros((out_dim, hidden))
        self.b2 = np.zeros(out_dim)

    @property
    def in_dim(self) -> int:
        return self.Fw.shape[1]

    @property
    def out_dim(self) -> int:
        return self.Fw.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.Fw, self.Fb, self.W1, self.b1, self.W2, self.b2]

    def flops(self) -> int:
        return self.Fw.size + self.W1.size + self.W2.size

    def copy(self) -> "StitchLayer":
        new = StitchLayer.__new__(StitchLayer)
        for name in ("Fw", "Fb", "W1", "b1", "W2", "b2"):
            setattr(new, name, getattr(self, name).copy())
        return new

    def residual(self, x: np.ndarray) -> np.ndarray:
        a0, _ = kernels.silu_forward(np.ascontiguousarray(x))
        a1, _ = kernels.silu_forward(a0 @ self.W1.T + self.b1)
        return a1 @ self.W2.T + self.b2

    def forward(self, h: np.ndarray):
        if h.shape[1] != self.in_dim:
            raise nn.ShapeError(f"stitch layer expects width {self.in_dim}, got {h.shape[1]}")
        x = h @ self.Fw.T + self.Fb
        a0, s0 = kernels.silu_forward(np.ascontiguousarray(x))
        p1 = a0 @ self.W1.T + self.b1
        a1, s1 = kernels.silu_forward(p1)
        out = x + a1 @ self.W2.T + self.b2
        return out, (h, x, a0, s0, p1, a1, s1)

    def backward(self, cache, dout: np.ndarray):
        h, x, a0, s0, p1, a1, s1 = cache
        gW2 = dout.T @ a1
        gb2 = dout.sum(axis=0)
        g1 = kernels.silu_backward(np.ascontiguousarray(dout @ self.W2), p1, s1)
        gW1 = g1.T @ a0
        gb1 = g1.sum(axis=0)
        gx = dout + kernels.silu_backward(np.ascontiguousarray(g1 @ self.W1), x, s0)
        gFw = gx.T @ h
        gFb = gx.sum(axis=0)
        dh = gx @ self.Fw
        return [gFw, gFb, gW1, gb1, gW2, gb2], dh

    def to_arrays(self, prefix="stitch.") -> dict:
        return {prefix + k: getattr(self, k) for k in ("Fw", "Fb", "W1", "b1", "W2", "b2")}

    @classmethod
    def from_arrays(cls, arrays: dict, prefix="stitch.") -> "StitchLayer":
        new = cls.__new__(cls)
        for k in ("Fw", "Fb", "W1", "b1", "W2", "b2"):
            setattr(new, k, np.array(arrays[prefix + k]))
        return new


class StitchedValueModel:
    """``V(z, t) = reward_suffix_j(stitch(generator_prefix_i(z, t)))``."""

    def __init__(self, gen: VelocityModel, i: int, stitch: StitchLayer, reward_net: nn.Mlp, j: int):
        if not 1 <= i <= gen.depth:
            raise IndexError(f"generator truncation {i} outside 1..{gen.depth}")
        if not 1 <= j <= reward_net.depth:
            raise IndexError(f"reward slice {j} outside 1..{reward_net.depth}")
        if stitch.in_dim != gen.net.widths[i] or stitch.out_dim != reward_net.widths[j - 1]:
            raise nn.ShapeError("stitch layer does not match the interface widths")
        self.gen = gen
        self.i = i
        self.stitch = stitch
        self.suffix = reward_net  # layers j..depth are used and trained
        self.j = j

    @classmethod
    def from_interface(cls, gen: VelocityModel, rew: RewardModel, iface: StitchInterface,
                       rng: np.random.Generator | None = None) -> "StitchedValueModel":
        return cls(gen, iface.i, StitchLayer(iface.W, rng), rew.net.copy(), iface.j)

    def trainable_params(self) -> list[np.ndarray]:
        return self.stitch.params() + self.suffix.layer_params(self.j, self.suffix.depth)

    def n_stitch_params(self) -> int:
        return len(self.stitch.params())

    def value(self, z, t) -> np.ndarray:
        h = self.gen.features(z, t, self.i)
        s, _ = self.stitch.forward(h)
        return self.suffix.forward(s, self.j)[0][:, 0]

    def value_tapes(self, z, t):
        h, gtape = self.gen.features_tape(z, t, self.i)
        s, scache = self.stitch.forward(h)
        y, rtape = self.suffix.forward(s, self.j)
        return y[:, 0], (gtape, scache, rtape)

    def backward(self, tapes, dv: np.ndarray, need_z: bool = True):
        """Gradients of ``sum(dv * V)``: ``(trainable_grads, dz)``."""
        gtape, scache, rtape = tapes
        rgrads, ds = self.suffix.backward(rtape, dv.reshape(-1, 1))
        sgrads, dh = self.stitch.backward(scache, ds)
        dz = self.gen.features_vjp(gtape, dh) if need_z else None
        return sgrads + rgrads, dz

    def grad(self, z, t) -> np.ndarray:
        v, tapes = self.value_tapes(z, t)
        return self.backward(tapes, np.ones_like(v))[1]

    def flops(self) -> int:
        return self.gen.flops(self.i) + self.stitch.flops() + self.suffix.flops(self.j)

    def eval_units(self) -> float:
        """Prefix share of one generator pass plus suffix share of one reward pass.

        The stitch layer is charged as one extra reward layer.
        """
        d_r = self.suffix.depth
        return self.i / self.gen.depth + (d_r - self.j + 2) / d_r

    def save(self, path, gen_path: str | None = None, meta: dict | None = None) -> None:
        arrays = self.stitch.to_arrays()
        arrays.update(self.suffix.to_arrays("suffix."))
        m = {"kind": "stitched-value", "i": self.i, "j": self.j, "suffix": self.suffix.spec(),
             "generator": gen_path, **(meta or {})}
        nn.save_arrays(path, arrays, m)

    @classmethod
    def load(cls, path, gen: VelocityModel | None = None) -> "StitchedValueModel":
        arrays, meta = nn.load_arrays(path)
        if meta.get("kind") != "stitched-value":
            raise nn.CheckpointFormatError(f"{path} is not a stitched value checkpoint")
        if gen is None:
            if not meta.get("generator"):
                raise nn.CheckpointFormatError("checkpoint does not reference a generator")
            gen = VelocityModel.load(meta["generator"])
        suffix = nn.Mlp.from_arrays(meta["suffix"], arrays, "suffix.")
        return cls(gen, int(meta["i"]), StitchLayer.from_arrays(arrays), suffix, int(meta["j"]))


# ------------------------------------------------------------------ stage 2


@dataclass
class StitchTrainConfig:
    steps: int = 20_000
    batch: int = 512
    lr: float = 1e-3
    stitch_lr_mult: float = 5.0
    warmup: int = 100
    final_lr_frac: float = 0.01
    noise: str = "beta22"  # or "uniform"
    seed: int = 0


def sample_noise_level(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "beta22":
        return rng.beta(2.0, 2.0, size=n)
    if kind == "uniform":
        return rng.uniform(0.0, 1.0, size=n)
    raise ValueError(f"unknown noise distribution {kind!r}")


def _schedule_lr(cfg: StitchTrainConfig, step: int) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(cfg.steps - cfg.warmup - 1, 1)
    lo = cfg.lr * cfg.final_lr_frac
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def train_stitch(svm: StitchedValueModel, data_sampler, target_reward, config: StitchTrainConfig = StitchTrainConfig(),
                 rng: np.random.Generator | None = None) -> tuple[StitchedValueModel, list[float]]:
    """Regress ``V(z_t)`` onto ``r(z_0)`` with the generator prefix frozen."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    params = svm.trainable_params()
    n_stitch = svm.n_stitch_params()
    mult = [config.stitch_lr_mult] * n_stitch + [1.0] * (len(params) - n_stitch)
    opt = nn.AdamW(lr=config.lr, lr_mult=mult)
    history = []
    for step in range(config.steps):
        z0 = np.asarray(data_sampler(config.batch, rng), dtype=np.float64)
        t = sample_noise_level(config.noise, config.batch, rng)
        eps = rng.standard_normal(z0.shape)
        zt = (1.0 - t)[:, None] * z0 + t[:, None] * eps
        target = np.asarray(target_reward(z0), dtype=np.float64).reshape(-1)
        v, tapes = svm.value_tapes(zt, t)
        resid = v - target
        loss = float(np.mean(resid * resid))
        if not math.isfinite(loss):
            raise TrainingError(f"value regression diverged at step {step}")
        grads, _ = svm.backward(tapes, 2.0 * resid / config.batch, need_z=False)
        opt.step(params, grads, lr=_schedule_lr(config, step))
        svm.suffix.mark_updated()
        history.append(loss)
    return svm, history


# ------------------------------------------------------------------ estimators


@dataclass
class EvalCost:
    """Per-evaluation cost of a value estimate at one latent."""

    full_evals: float = 0.0  # complete generator forward passes
    prefix_evals: float = 0.0  # truncated generator passes
    decoder_evals: float = 0.0  # reward-on-clean-estimate passes
    flops: float = 0.0  # multiply-adds
    units: float = 0.0  # model-equivalents: generator layers / depth + reward layers / depth


class ValueEstimator:
    """Common surface: ``value(z, t)``, ``grad(z, t)`` and ``cost(t)``."""

    name = "base"
    differentiable = True

    def value(self, z, t) -> np.ndarray:
        raise NotImplementedError

    def grad(self, z, t) -> np.ndarray:
        raise NonDifferentiableError(f"{self.name} estimator has no gradient")

    def cost(self, t: float = 0.5) -> EvalCost:
        return EvalCost()


def _as_batch(z):
    return np.atleast_2d(np.asarray(z, dtype=np.float64))


class StitchEstimator(ValueEstimator):
    name = "stitch"

    def __init__(self, svm: StitchedValueModel):
        self.svm = svm

    def value(self, z, t):
        return self.svm.value(_as_batch(z), t)

    def grad(self, z, t):
        return self.svm.grad(_as_batch(z), t)

    def cost(self, t=0.5):
        return EvalCost(prefix_evals=1.0, flops=float(self.svm.flops()), units=self.svm.eval_units())


def _reward_flops(rew) -> float:
    if isinstance(rew, RewardModel) and rew.net is not None:
        return float(rew.net.flops())
    return float(np.asarray(getattr(rew, "a", getattr(getattr(rew, "analytic", None), "a", [0]))).size)


class TweedieEstimator(ValueEstimator):
    """``r(z - t u(z, t))``: the reward at the one-step clean estimate."""

    name = "tweedie"

    def __init__(self, gen, rew):
        self.gen = gen
        self.rew = rew

    def value(self, z, t):
        return np.asarray(self.rew(gen_mod.tweedie_denoise(self.gen, _as_batch(z), t))).reshape(-1)

    def grad(self, z, t):
        z = _as_batch(z)
        u, tape = self.gen.velocity_tape(z, t)
        den = z - np.asarray(t, dtype=np.float64).reshape(-1, 1) * u
        g = self.rew.grad(den)
        _, du = self.gen.vjp(tape, g)
        return g - np.asarray(t, dtype=np.float64).reshape(-1, 1) * du

    def cost(self, t=0.5):
        gen_flops = self.gen.flops() if hasattr(self.gen, "flops") else 0.0
        return EvalCost(full_evals=1.0, decoder_evals=1.0, flops=float(gen_flops) + _reward_flops(self.rew),
                        units=2.0)


class MCEstimator(ValueEstimator):
    """Average terminal reward over time-reversal SDE rollouts continued from each latent.

    ``soft=True`` returns ``log mean exp r`` instead.
    """

    name = "mc"
    differentiable = False

    def __init__(self, gen, rew, n_rollouts: int = 16, n_steps: int = 100, rng: np.random.Generator | None = None,
                 soft: bool = False):
        self.gen = gen
        self.rew = rew
        self.n_rollouts = n_rollouts
        self.n_steps = n_steps
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.soft = soft

    def value_with_stderr(self, z, t):
        z = _as_batch(z)
        t = float(np.asarray(t).reshape(-1)[0])
        rep = np.repeat(z, self.n_rollouts, axis=0)
        z0 = gen_mod.rollout_from(self.gen, rep, t, self.n_steps, self.rng)
        r = np.asarray(self.rew(z0)).reshape(z.shape[0], self.n_rollouts)
        out = [analytic.summarize_rewards(row, soft=self.soft) for row in r]
        return np.array([o[0] for o in out]), np.array([o[1] for o in out])

    def value(self, z, t):
        return self.value_with_stderr(z, t)[0]

    def cost(self, t=0.5):
        remaining = len(gen_mod.remaining_grid(t, self.n_steps)) - 1 if t > 0 else 0
        gen_flops = self.gen.flops() if hasattr(self.gen, "flops") else 0.0
        n = self.n_rollouts * remaining
        return EvalCost(full_evals=float(n), decoder_evals=float(self.n_rollouts),
                        flops=float(n * gen_flops + self.n_rollouts * _reward_flops(self.rew)),
                        units=float(n + self.n_rollouts))


class AnalyticEstimator(ValueEstimator):
    """Exact standard (or, with ``soft=True``, soft) value of a Gaussian mixture."""

    name = "analytic"

    def __init__(self, gmm: analytic.GmmSpec, reward: analytic.LinearReward, soft: bool = False):
        self.gmm = gmm
        self.reward = reward
        self.soft = soft

    def _per_time(self, fn, z, t):
        z = _as_batch(z)
        t_arr = np.asarray(t, dtype=np.float64).reshape(-1)
        if t_arr.size == 1:
            return fn(self.gmm, self.reward, float(t_arr[0]), z)
        out = None
        for tv in np.unique(t_arr):
            rows = t_arr == tv
            res = fn(self.gmm, self.reward, float(tv), z[rows])
            if out is None:
                out = np.empty((z.shape[0],) + res.shape[1:])
            out[rows] = res
        return out

    def value(self, z, t):
        return self._per_time(analytic.soft_value if self.soft else analytic.value, z, t)

    def grad(self, z, t):
        return self._per_time(analytic.soft_value_grad if self.soft else analytic.value_grad, z, t)


def make_estimator(kind: str, **kw) -> ValueEstimator:
    kinds = {"stitch": StitchEstimator, "tweedie": TweedieEstimator, "mc": MCEstimator,
             "analytic": AnalyticEstimator}
    if kind not in kinds:
        raise ValueError(f"unknown estimator {kind!r}; choose from {sorted(kinds)}")
    return kinds[kind](**kw)


def value(estimator: ValueEstimator, z, t) -> np.ndarray:
    return estimator.value(z, t)


def grad_value(estimator: ValueEstimator, z, t) -> np.ndarray:
    if not estimator.differentiable:
        raise NonDifferentiableError(f"{estimator.name} estimator is not differentiable")
    return estimator.grad(z, t)
