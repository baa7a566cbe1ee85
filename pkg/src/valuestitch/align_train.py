"""Training-time alignment: direct reward finetuning and negative-aware finetuning.

Both come in a terminal-reward form and a value form. The value form halts
rollouts at an intermediate latent ``z_tau`` and scores it with a value
estimator instead of denoising to ``t = 0``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import analytic, generator as gen_mod, nn, schedule
from .generator import TrainingError, VelocityModel
from .stitch import ValueEstimator

log = logging.getLogger(__name__)

REFERENCE_GRID = 25
# stop-step windows on a 25-step reference grid, rescaled to the run's grid
STOP_PRESETS = {
    "high": (2, 12),
    "tight-mid": (12, 17),
    "wide": (12, 25),
    "low": (20, 25),
}


class GroupError(ValueError):
    pass


def stop_window(preset: str | tuple, n_steps: int) -> tuple[int, int]:
    """Inclusive ``(lo, hi)`` range of stop indices (steps taken before halting)."""
    if isinstance(preset, str):
        if preset not in STOP_PRESETS:
            raise ValueError(f"unknown stop preset {preset!r}; choose from {sorted(STOP_PRESETS)}")
        lo, hi = STOP_PRESETS[preset]
        lo = int(round(lo * n_steps / REFERENCE_GRID))
        hi = int(round(hi * n_steps / REFERENCE_GRID))
    else:
        lo, hi = (int(x) for x in preset)
    lo = max(1, lo)
    hi = min(n_steps, hi)
    if lo > hi:
        raise ValueError(f"empty stop window ({lo}, {hi}) on a {n_steps}-step grid")
    return lo, hi


def sample_stop(window: tuple[int, int], rng: np.random.Generator) -> int:
    return int(rng.integers(window[0], window[1] + 1))


def _is_value_target(target) -> bool:
    return isinstance(target, ValueEstimator)


def _target_value(target, z, t):
    if _is_value_target(target):
        return np.asarray(target.value(z, t)).reshape(-1)
    if t > 0.0:
        raise ValueError("a terminal reward needs the rollout to reach t = 0")
    return np.asarray(target(z)).reshape(-1)


def _target_grad(target, z, t):
    if _is_value_target(target):
        return target.grad(z, t)
    return target.grad(z)


def _target_cost(target, t) -> tuple[float, float]:
    if _is_value_target(target):
        c = target.cost(t)
        return c.full_evals, c.prefix_evals
    return 0.0, 0.0


def _check_grads(grads, step: int) -> None:
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient at training step {step}")


def _accumulate(total, grads, scale=1.0):
    for acc, g in zip(total, grads):
        acc += scale * g


# ------------------------------------------------------------------ DRaFT


@dataclass
class DraftConfig:
    mode: str = "terminal"  # or "value"
    k: int = 1  # backprop window: last K steps before the stop
    stop_window: tuple | str = (3, 7)
    reg_weight: float = 0.0
    n_steps: int = 10
    batch: int = 64
    lr: float = 1e-4
    max_grad_norm: float = 10.0

    def __post_init__(self):
        if self.mode not in ("terminal", "value"):
            raise ValueError(f"unknown DRaFT mode {self.mode!r}")
        if not 1 <= self.k <= self.n_steps:
            raise ValueError("need 1 <= K <= rollout steps")
        if self.reg_weight < 0:
            raise ValueError("regularizer weight must be >= 0")
        stop_window(self.stop_window, self.n_steps)


@dataclass
class DraftStepReport:
    loss: float
    objective: float  # mean reward or value at the stop
    stop: int
    step_grad_norms: np.ndarray  # per rollout step; exact zeros outside the window
    grad_norm: float
    full_evals: float
    prefix_evals: float


def draft_gradients(model: VelocityModel, target, config: DraftConfig, z1: np.ndarray, noise: np.ndarray,
                    stop: int, ref_model: VelocityModel | None = None):
    """Loss ``-mean(objective) + reg_weight * R`` and its parameter gradients.

    Gradients flow through the last ``K`` steps before ``stop``; earlier
    steps are run without a tape. ``R`` is the squared output distance to
    ``ref_model`` on the (detached) rollout states inside the window.
    """
    times = schedule.time_grid(config.n_steps)
    n = z1.shape[0]
    first = max(0, stop - config.k)
    z = z1
    taped = []
    for k in range(stop):
        t, t_next = float(times[k]), float(times[k + 1])
        a, b, c = schedule.sde_step_coeffs(t, t_next)
        if k >= first:
            u, tape = model.velocity_tape(z, t)
            taped.append((k, z, t, u, tape, a, b))
        else:
            u = model.velocity(z, t)
        z = a * z + b * u + c * noise[k]
    t_stop = float(times[stop])
    obj = _target_value(target, z, t_stop)
    loss = -float(obj.mean())
    grads = [np.zeros_like(p) for p in model.params()]
    step_norms = np.zeros(config.n_steps)
    g = -_target_grad(target, z, t_stop) / n
    n_win = len(taped)
    for k, zk, t, u, tape, a, b in reversed(taped):
        pg, dz = model.vjp(tape, b * g)
        step_norms[k] = math.sqrt(sum(float(np.sum(x * x)) for x in pg))
        _accumulate(grads, pg)
        if config.reg_weight > 0.0 and ref_model is not None:
            diff = u - ref_model.velocity(zk, t)
            loss += config.reg_weight * float(np.sum(diff * diff)) / (n * n_win)
            rg, _ = model.vjp(tape, 2.0 * config.reg_weight * diff / (n * n_win), need_input_grad=False)
            _accumulate(grads, rg)
        g = a * g + dz
    return loss, float(obj.mean()), grads, step_norms


def draft_step(model: VelocityModel, target, config: DraftConfig, rng: np.random.Generator,
               opt: nn.AdamW | None = None, ref_model: VelocityModel | None = None,
               step_index: int = 0) -> DraftStepReport:
    """One DRaFT update (terminal reward or value at a sampled stop step)."""
    if config.mode == "value":
        if not _is_value_target(target):
            raise TypeError("value DRaFT needs a value estimator")
        stop = sample_stop(stop_window(config.stop_window, config.n_steps), rng)
    else:
        stop = config.n_steps
    d = model.data_dim
    z1 = rng.standard_normal((config.batch, d))
    noise = rng.standard_normal((stop, config.batch, d))
    loss, obj, grads, norms = draft_gradients(model, target, config, z1, noise, stop, ref_model)
    _check_grads(grads, step_index)
    gnorm = nn.clip_grad_norm(grads, config.max_grad_norm)
    opt = opt or nn.AdamW(lr=config.lr)
    opt.step(model.params(), grads)
    model.net.mark_updated()
    t_stop = float(schedule.time_grid(config.n_steps)[stop])
    fe, pe = _target_cost(target, t_stop)
    # rollout evaluations only; the regularizer's reference passes are not charged
    return DraftStepReport(loss, obj, stop, norms, gnorm, float(config.batch * (stop + fe)),
                           float(config.batch * pe))


# ------------------------------------------------------------------ NFT


@dataclass
class NftConfig:
    mode: str = "terminal"  # or "value"
    beta: float = 0.5
    rho: float = 0.9
    z_rule: str | float = "std"
    group_size: int = 16
    n_groups: int = 4
    stop_window: tuple | str = "tight-mid"
    n_steps: int = 10
    lr: float = 1e-4
    max_grad_norm: float = 10.0

    def __post_init__(self):
        if self.mode not in ("terminal", "value"):
            raise ValueError(f"unknown NFT mode {self.mode!r}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.group_size < 2:
            raise GroupError("groups need at least two members")
        stop_window(self.stop_window, self.n_steps)

    @property
    def batch(self) -> int:
        return self.group_size * self.n_groups


Z_FLOOR = 1e-6


def nft_normalize_rewards(raw, z_rule: str | float = "std") -> np.ndarray:
    """Map one group's rewards to optimality probabilities in ``[0, 1]``.

    Rewards are centered on the group mean, divided by ``Z`` (the group
    standard deviation floored at 1e-6, or a fixed number) and sent through
    ``1/2 + 1/2 clip(., -1, 1)``.
    """
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if raw.size < 2:
        raise GroupError("reward normalization needs a group of at least two")
    centered = raw - raw.mean()
    if z_rule == "std":
        z = max(float(raw.std()), Z_FLOOR)
    else:
        z = float(z_rule)
        if z <= 0:
            raise ValueError("normalization scale must be positive")
    return 0.5 + 0.5 * np.clip(centered / z, -1.0, 1.0)


def implicit_policies(u_old: np.ndarray, u_theta: np.ndarray, beta: float):
    """Positive and negative velocity mixtures; they always average to ``u_old``."""
    return (1.0 - beta) * u_old + beta * u_theta, (1.0 + beta) * u_old - beta * u_theta


def nft_loss_and_grads(model: VelocityModel, old: VelocityModel, z_anchor: np.ndarray, tau: float,
                       r: np.ndarray, beta: float, rng: np.random.Generator):
    """Weighted regression of the implicit policies onto the bridge velocity.

    ``t ~ U(tau, 1)``; ``z_t = abar z_tau + sbar eps`` and the target is
    ``dabar z_tau + dsbar eps``. With ``tau = 0`` this is the ordinary
    conditional flow-matching target.
    """
    n = z_anchor.shape[0]
    t = rng.uniform(tau, 1.0, size=n)
    eps = rng.standard_normal(z_anchor.shape)
    coef = [schedule.bridge(float(tv), tau) for tv in t]
    ab = np.array([c.alpha_bar for c in coef])[:, None]
    sb = np.array([c.sigma_bar for c in coef])[:, None]
    dab = np.array([c.d_alpha_bar for c in coef])[:, None]
    dsb = np.array([c.d_sigma_bar for c in coef])[:, None]
    zt = ab * z_anchor + sb * eps
    target = dab * z_anchor + dsb * eps
    u_old = old.velocity(zt, t)
    u, tape = model.velocity_tape(zt, t)
    up, um = implicit_policies(u_old, u, beta)
    rp = r[:, None]
    res_p, res_m = up - target, um - target
    loss = float(np.sum(rp * res_p * res_p + (1.0 - rp) * res_m * res_m) / n)
    du = (2.0 * beta * rp * res_p - 2.0 * beta * (1.0 - rp) * res_m) / n
    grads, _ = model.vjp(tape, du, need_input_grad=False)
    return loss, grads


def ema_update(old: VelocityModel, model: VelocityModel, rho: float) -> None:
    for po, p in zip(old.params(), model.params()):
        po *= rho
        po += (1.0 - rho) * p
    old.net.mark_updated()


@dataclass
class NftStepReport:
    loss: float
    mean_raw: float
    stop: int
    full_evals: float
    prefix_evals: float


def nft_step(model: VelocityModel, old: VelocityModel, target, config: NftConfig, rng: np.random.Generator,
             opt: nn.AdamW | None = None, step_index: int = 0) -> NftStepReport:
    """One NFT update: rollouts from ``old``, normalized rewards, weighted regression, EMA."""
    times = schedule.time_grid(config.n_steps)
    if config.mode == "value":
        if not _is_value_target(target):
            raise TypeError("value NFT needs a value estimator")
        stop = sample_stop(stop_window(config.stop_window, config.n_steps), rng)
    else:
        stop = config.n_steps
    tau = float(times[stop])
    z = rng.standard_normal((config.batch, model.data_dim))
    z, _ = gen_mod.integrate(old, z, times[: stop + 1], "sde", rng)
    raw = _target_value(target, z, tau)
    r = np.concatenate([nft_normalize_rewards(g, config.z_rule)
                        for g in raw.reshape(config.n_groups, config.group_size)])
    loss, grads = nft_loss_and_grads(model, old, z, tau, r, config.beta, rng)
    if not math.isfinite(loss):
        raise TrainingError(f"NFT loss diverged at training step {step_index}")
    _check_grads(grads, step_index)
    nn.clip_grad_norm(grads, config.max_grad_norm)
    opt = opt or nn.AdamW(lr=config.lr)
    opt.step(model.params(), grads)
    model.net.mark_updated()
    ema_update(old, model, config.rho)
    fe, pe = _target_cost(target, tau)
    return NftStepReport(loss, float(raw.mean()), stop, float(config.batch * (stop + fe)),
                         float(config.batch * pe))


# ------------------------------------------------------------------ loops


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (step, loss, mean_reward_fresh_rollout, full, prefix)

    HEADER = ("step", "loss", "mean_reward_fresh_rollout", "full_evals_count", "prefix_evals_count")


def fresh_rollout_reward(model, reward, n: int, n_steps: int, seed: int) -> np.ndarray:
    """Terminal rewards of ``n`` fresh SDE rollouts under a fixed seed."""
    res = gen_mod.sample(model, gen_mod.SamplerConfig(n_steps=n_steps, seed=seed), n, keep_trajectory=False)
    return np.asarray(reward(res.samples)).reshape(-1)


def train_draft(model: VelocityModel, target, config: DraftConfig, n_iters: int, rng: np.random.Generator,
                eval_reward=None, eval_every: int = 0, eval_n: int = 512, eval_seed: int = 12345) -> TrainLog:
    ref = model.copy() if config.reg_weight > 0 else None
    opt = nn.AdamW(lr=config.lr)
    log_ = TrainLog()
    full = prefix = 0.0
    for it in range(n_iters):
        rep = draft_step(model, target, config, rng, opt, ref, it)
        full += rep.full_evals
        prefix += rep.prefix_evals
        fresh = float("nan")
        if eval_reward is not None and eval_every and (it + 1) % eval_every == 0:
            fresh = float(fresh_rollout_reward(model, eval_reward, eval_n, config.n_steps, eval_seed).mean())
        log_.rows.append((it, rep.loss, fresh, full, prefix))
    return log_


def train_nft(model: VelocityModel, target, config: NftConfig, n_iters: int, rng: np.random.Generator,
              eval_reward=None, eval_every: int = 0, eval_n: int = 512, eval_seed: int = 12345,
              old: VelocityModel | None = None) -> TrainLog:
    old = model.copy() if old is None else old
    opt = nn.AdamW(lr=config.lr)
    log_ = TrainLog()
    full = prefix = 0.0
    for it in range(n_iters):
        rep = nft_step(model, old, target, config, rng, opt, it)
        full += rep.full_evals
        prefix += rep.prefix_evals
        fresh = float("nan")
        if eval_reward is not None and eval_every and (it + 1) % eval_every == 0:
            fresh = float(fresh_rollout_reward(model, eval_reward, eval_n, config.n_steps, eval_seed).mean())
        log_.rows.append((it, rep.loss, fresh, full, prefix))
    return log_


# ------------------------------------------------------------------ KL-regularized objective


@dataclass
class KlRlReport:
    lam_star: float
    objective_at_star: float
    flat: bool
    method: str


def _kl_rl_closed(gmm: analytic.GmmSpec, reward: analytic.LinearReward, lam: float) -> float:
    # for q = p exp(lam r) / Z: KL(q||p) = lam E_q[r] - log Z, so J = (1 - lam) E_q[r] + log Z
    q = analytic.tilted(gmm, reward.scaled(lam))
    eq_r = float(q.weights @ (q.means @ reward.a) + reward.b)
    return (1.0 - lam) * eq_r + analytic.log_partition(gmm, reward.scaled(lam))


def _quadrature_grid(gmm: analytic.GmmSpec, n_side: int):
    sd = np.sqrt(np.max(np.diagonal(gmm.covariances, axis1=1, axis2=2)))
    lo = gmm.means.min(axis=0) - 12.0 * sd - 3.0
    hi = gmm.means.max(axis=0) + 12.0 * sd + 3.0
    axes = [np.linspace(lo[k], hi[k], n_side) for k in range(gmm.dim)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, gmm.dim)
    cell = float(np.prod([(ax[1] - ax[0]) for ax in axes]))
    return grid, cell


def _kl_rl_quadrature(gmm, reward, lam: float, grid, cell) -> float:
    q = analytic.tilted(gmm, reward.scaled(lam))
    log_q = q.log_density(grid)
    log_p = gmm.log_density(grid)
    w = np.exp(log_q) * cell
    return float(np.sum(w * (reward(grid) - (log_q - log_p))))


def kl_rl_objective(gmm: analytic.GmmSpec, reward: analytic.LinearReward, lam: float,
                    method: str = "closed", n_side: int | None = None) -> float:
    """``E_q[r] - KL(q || p)`` for the tilt ``q`` of strength ``lam``."""
    if method == "closed":
        return _kl_rl_closed(gmm, reward, lam)
    if method == "quadrature":
        if gmm.dim > 2:
            raise ValueError("quadrature is limited to d <= 2")
        grid, cell = _quadrature_grid(gmm, n_side or (20001 if gmm.dim == 1 else 601))
        return _kl_rl_quadrature(gmm, reward, lam, grid, cell)
    raise ValueError(f"unknown method {method!r}")


def kl_rl_equivalence_check(gmm: analytic.GmmSpec, reward: analytic.LinearReward, method: str | None = None,
                            bracket=(0.0, 3.0)) -> KlRlReport:
    """Maximize the KL-regularized reward over tilt strength by golden-section search."""
    method = method or ("quadrature" if gmm.dim <= 2 else "closed")
    if method not in ("closed", "quadrature"):
        raise ValueError(f"unknown method {method!r}")
    if method == "quadrature":
        grid, cell = _quadrature_grid(gmm, 20001 if gmm.dim == 1 else 601)

        def f(lam):
            return -_kl_rl_quadrature(gmm, reward, lam, grid, cell)
    else:
        def f(lam):
            return -_kl_rl_closed(gmm, reward, lam)

    probe = np.array([f(x) for x in np.linspace(*bracket, 7)])
    if np.ptp(probe) < 1e-12:
        return KlRlReport(float(np.mean(bracket)), float(-probe[0]), True, method)
    res = optimize.minimize_scalar(f, bracket=bracket, method="golden", tol=1e-8)
    return KlRlReport(float(res.x), float(-res.fun), False, method)
