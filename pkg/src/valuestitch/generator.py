"""Flow-matching generator: velocity networks, training and ODE/SDE sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import analytic, nn, schedule

log = logging.getLogger(__name__)

N_FREQUENCIES = 8
FREQUENCIES = np.geomspace(1.0, 64.0, N_FREQUENCIES)
EMBED_DIM = 2 * N_FREQUENCIES
# "sde" keeps marginals with extra noise; "reverse" is the exact time reversal,
# whose runs from a fixed (z, t) sample the posterior over z_0
MODES = ("ode", "sde", "reverse")


class TrainingError(RuntimeError):
    pass


class IntegrationError(RuntimeError):
    def __init__(self, step: int, msg: str = "non-finite state"):
        super().__init__(f"{msg} at step {step}")
        self.step = step


def time_embedding(t, n: int) -> np.ndarray:
    """Sinusoidal features ``[sin(w t), cos(w t)]`` for 8 geometric frequencies."""
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1))
    ang = t * FREQUENCIES[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class VelocityModel:
    """``u_theta(z, t)``: an MLP over ``[z, embed(t)]``."""

    kind = "learned"

    def __init__(self, net: nn.Mlp, data_dim: int):
        if net.widths[0] != data_dim + EMBED_DIM or net.widths[-1] != data_dim:
            raise nn.ShapeError(f"velocity net widths {net.widths} do not fit data dim {data_dim}")
        self.net = net
        self.data_dim = data_dim

    @classmethod
    def init(cls, data_dim: int, rng: np.random.Generator, hidden=(128, 128, 128)) -> "VelocityModel":
        widths = [data_dim + EMBED_DIM, *hidden, data_dim]
        return cls(nn.Mlp.init(widths, rng), data_dim)

    @property
    def depth(self) -> int:
        return self.net.depth

    def copy(self) -> "VelocityModel":
        return VelocityModel(self.net.copy(), self.data_dim)

    def params(self) -> list[np.ndarray]:
        return self.net.params()

    def _inputs(self, z, t) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.data_dim:
            raise nn.ShapeError(f"expected (n, {self.data_dim}) latents, got {z.shape}")
        return np.concatenate([z, time_embedding(t, z.shape[0])], axis=1)

    def velocity(self, z, t) -> np.ndarray:
        return self.net.forward(self._inputs(z, t))[0]

    def velocity_tape(self, z, t):
        return self.net.forward(self._inputs(z, t))

    def vjp(self, tape, dv, need_input_grad: bool = True):
        """``(param_grads, dz)`` for an upstream gradient on the velocity."""
        grads, dx = self.net.backward(tape, dv, need_input_grad)
        dz = dx[:, : self.data_dim] if dx is not None else None
        return grads, dz

    def features(self, z, t, i: int) -> np.ndarray:
        """Post-activation hidden state after layer ``i`` (time embedding included in the input)."""
        return self.net.forward_truncated(self._inputs(z, t), i)

    def features_tape(self, z, t, i: int):
        return self.net.forward(self._inputs(z, t), 1, i)

    def features_vjp(self, tape, dh):
        _, dx = self.net.backward(tape, dh)
        return dx[:, : self.data_dim]

    def flops(self, stop: int | None = None) -> int:
        return self.net.flops(1, stop)

    def save(self, path, opt: nn.AdamW | None = None, meta: dict | None = None) -> None:
        nn.save_checkpoint(path, self.net, opt, {"role": "velocity", "data_dim": self.data_dim, **(meta or {})})

    @classmethod
    def load(cls, path) -> "VelocityModel":
        net, _, meta = nn.load_checkpoint(path)
        if meta.get("role") != "velocity":
            raise nn.CheckpointFormatError(f"{path} is not a velocity checkpoint")
        return cls(net, int(meta["data_dim"]))


class OracleVelocity:
    """The exact marginal velocity of a Gaussian mixture, wrapped as a model."""

    kind = "oracle"

    def __init__(self, gmm: analytic.GmmSpec):
        self.gmm = gmm
        self.data_dim = gmm.dim

    def params(self) -> list[np.ndarray]:
        return []

    def _per_time(self, fn, z, t):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        t_arr = np.asarray(t, dtype=np.float64)
        if t_arr.ndim == 0 or t_arr.size == 1:
            return fn(self.gmm, float(t_arr.reshape(-1)[0]), z)
        out = None
        for tv in np.unique(t_arr):
            rows = t_arr == tv
            res = fn(self.gmm, float(tv), z[rows])
            if out is None:
                out = np.empty((z.shape[0],) + res.shape[1:])
            out[rows] = res
        return out

    def velocity(self, z, t) -> np.ndarray:
        return self._per_time(analytic.velocity, z, t)

    def velocity_tape(self, z, t):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return self.velocity(z, t), (z, t)

    def vjp(self, tape, dv, need_input_grad: bool = True):
        z, t = tape
        jac = self._per_time(analytic.velocity_jacobian, z, t)
        return [], np.einsum("nij,ni->nj", jac, dv)

    def features(self, z, t, i):
        raise TypeError("the oracle velocity has no hidden layers")


def tweedie_denoise(model, z, t) -> np.ndarray:
    """Posterior-mean estimate ``z - t u(z, t)``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return z - np.asarray(t, dtype=np.float64).reshape(-1, 1) * model.velocity(z, t)


# ------------------------------------------------------------------ training


@dataclass
class FmConfig:
    steps: int = 20_000
    batch: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 0


def fm_loss_and_grads(model: VelocityModel, z0: np.ndarray, t: np.ndarray, eps: np.ndarray):
    """Conditional flow-matching loss ``mean ||u(z_t, t) - (eps - z_0)||^2`` and its gradients."""
    zt = (1.0 - t)[:, None] * z0 + t[:, None] * eps
    target = eps - z0
    u, tape = model.velocity_tape(zt, t)
    resid = u - target
    n = z0.shape[0]
    loss = float(np.sum(resid * resid) / n)
    grads, _ = model.vjp(tape, 2.0 * resid / n, need_input_grad=False)
    return loss, grads


def train_fm(model: VelocityModel, data_sampler: Callable, config: FmConfig = FmConfig(),
             rng: np.random.Generator | None = None) -> tuple[VelocityModel, list[float]]:
    """Train in place by conditional flow matching; returns ``(model, loss_history)``."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    opt = nn.AdamW(lr=config.lr, weight_decay=config.weight_decay)
    params = model.params()
    history: list[float] = []
    for step in range(config.steps):
        z0 = np.asarray(data_sampler(config.batch, rng), dtype=np.float64)
        t = rng.uniform(0.0, 1.0, size=config.batch)
        eps = rng.standard_normal(z0.shape)
        loss, grads = fm_loss_and_grads(model, z0, t, eps)
        if not math.isfinite(loss):
            raise TrainingError(f"flow-matching loss diverged at step {step}")
        opt.step(params, grads)
        model.net.mark_updated()
        history.append(loss)
        if config.log_every and step % config.log_every == 0:
            log.info("fm step %d loss %.5f", step, loss)
    return model, history


# ------------------------------------------------------------------ sampling


@dataclass
class SamplerConfig:
    n_steps: int = 100
    mode: str = "sde"
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 2:
            raise ValueError("n_steps must be >= 2")
        if self.mode not in MODES:
            raise ValueError(f"unknown sampler mode {self.mode!r}")


@dataclass
class SampleResult:
    samples: np.ndarray  # (n, d)
    times: np.ndarray  # (K + 1,) decreasing
    trajectory: np.ndarray | None = field(default=None, repr=False)  # (K + 1, n, d)


def step(model, z: np.ndarray, t: float, t_next: float, mode: str, noise: np.ndarray | None,
         extra_drift: np.ndarray | None = None) -> np.ndarray:
    """One Euler(-Maruyama) step from ``t`` down to ``t_next``.

    ``extra_drift`` is added to the SDE drift (in ``dz/dt`` units).
    """
    h = t - t_next
    u = model.velocity(z, t)
    if mode == "ode":
        out = z - h * u
    else:
        a, b, c = schedule.sde_step_coeffs(t, t_next, reversal=mode == "reverse")
        out = a * z + b * u
        if c > 0.0:
            out = out + c * noise
    if extra_drift is not None:
        out = out - h * extra_drift
    return out


class NoiseStreams:
    """Gaussian noise keyed by ``(step, chain)`` so results do not depend on batch layout.

    Step ``k`` of chain ``c`` draws from its own generator, so a chain's
    noise is the same whether it runs alone or inside a population.
    """

    INIT = 0

    def __init__(self, seed: int):
        self.seed = int(seed)

    def rng(self, *key: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=tuple(int(k) for k in key)))

    def initial(self, n: int, d: int) -> np.ndarray:
        out = np.empty((n, d))
        for c in range(n):
            out[c] = self.rng(self.INIT, c).standard_normal(d)
        return out

    def step(self, k: int, n: int, d: int, m: int = 1) -> np.ndarray:
        """``(n, m, d)`` noise for step ``k``; proposal 0 matches the single-proposal draw."""
        out = np.empty((n, m, d))
        for c in range(n):
            out[c] = self.rng(k + 1, c).standard_normal((m, d))
        return out

    def __call__(self, k: int, z: np.ndarray) -> np.ndarray:
        return self.step(k, z.shape[0], z.shape[1])[:, 0]


def integrate(model, z: np.ndarray, times: np.ndarray, mode: str, rng: np.random.Generator | None,
              keep_trajectory: bool = False, drift_fn: Callable | None = None,
              noise_fn: Callable | None = None):
    """Integrate from ``times[0]`` down to ``times[-1]``; returns ``(z_end, trajectory_or_None)``.

    ``noise_fn(k, z)`` replaces ``rng`` as the noise source when given.
    """
    traj = [z.copy()] if keep_trajectory else None
    for k in range(len(times) - 1):
        t, t_next = float(times[k]), float(times[k + 1])
        if mode == "ode":
            noise = None
        elif noise_fn is not None:
            noise = noise_fn(k, z)
        else:
            noise = rng.standard_normal(z.shape)
        extra = drift_fn(z, t, t_next) if drift_fn is not None else None
        z = step(model, z, t, t_next, mode, noise, extra)
        if not np.all(np.isfinite(z)):
            raise IntegrationError(k)
        if keep_trajectory:
            traj.append(z.copy())
    return z, (np.stack(traj) if keep_trajectory else None)


def sample(model, config: SamplerConfig, n_samples: int, rng: np.random.Generator | None = None,
           keep_trajectory: bool = True) -> SampleResult:
    """Draw ``z_1 ~ N(0, I)`` and integrate to ``t = 0``."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    times = schedule.time_grid(config.n_steps)
    d = model.data_dim
    if n_samples == 0:
        empty = np.zeros((0, d))
        return SampleResult(empty, times, np.zeros((len(times), 0, d)) if keep_trajectory else None)
    z = rng.standard_normal((n_samples, d))
    z, traj = integrate(model, z, times, config.mode, rng, keep_trajectory)
    return SampleResult(z, times, traj)


def remaining_grid(t: float, n_steps: int) -> np.ndarray:
    """Grid from ``t`` to 0 with the step size of an ``n_steps`` grid over [0, 1]."""
    k = max(1, int(math.ceil(t * n_steps - 1e-9)))
    return np.linspace(t, 0.0, k + 1)


def rollout_from(model, z: np.ndarray, t: float, n_steps: int, rng: np.random.Generator,
                 mode: str = "reverse") -> np.ndarray:
    """Continue sampling from latents ``z`` at time ``t`` to ``t = 0``.

    The default time-reversal mode makes the endpoints posterior draws, so
    averaging a reward over them estimates the value at ``(z, t)``.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if t <= 0.0:
        return z.copy()
    return integrate(model, z.copy(), remaining_grid(t, n_steps), mode, rng)[0]


def trajectory_rows(result: SampleResult):
    """Yield ``(chain_id, step, t, z...)`` rows of a sampled trajectory."""
    traj = result.trajectory
    if traj is None:
        traj = result.samples[None]
        times = result.times[-1:]
    else:
        times = result.times
    for k in range(traj.shape[0]):
        for c in range(traj.shape[1]):
            yield (c, k, float(times[k]), *map(float, traj[k, c]))
