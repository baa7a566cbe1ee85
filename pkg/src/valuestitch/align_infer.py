"""Inference-time alignment: value-gradient guidance, Best-of-N and FK steering."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import generator as gen_mod, kernels, schedule
from .generator import IntegrationError, NoiseStreams, SampleResult, SamplerConfig
from .stitch import EvalCost, NonDifferentiableError, ValueEstimator

log = logging.getLogger(__name__)


RESAMPLE_KEY = 2**31  # stream id for resampling uniforms, outside particle ids


class DegenerateWeightsWarning(RuntimeWarning):
    pass


# ------------------------------------------------------------------ guidance


@dataclass
class GuidanceConfig:
    estimator: ValueEstimator
    scale: float = 1.0
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(n_steps=100))

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")


def guidance_drift(estimator: ValueEstimator, scale: float):
    """Extra drift ``c * guidance_coeff * grad V`` for :func:`generator.integrate`.

    The coefficient is taken at the step's lower time, like the diffusion.
    At ``t = 1`` the value is flat in ``z`` and the step is left unguided.
    """

    def drift(z, t, t_next):
        if t >= 1.0:
            return None
        g = estimator.grad(z, t)
        return (scale * schedule.guidance_coeff(t_next)) * g

    return drift


def guided_sample(gen, config: GuidanceConfig, n: int, rng: np.random.Generator | None = None,
                  keep_trajectory: bool = True) -> SampleResult:
    """SDE sampling with the value gradient added to the drift."""
    if not config.estimator.differentiable:
        raise NonDifferentiableError(f"{config.estimator.name} estimator cannot guide sampling")
    sc = config.sampler
    rng = np.random.default_rng(sc.seed) if rng is None else rng
    times = schedule.time_grid(sc.n_steps)
    z = rng.standard_normal((n, gen.data_dim))
    drift = guidance_drift(config.estimator, config.scale) if config.scale > 0 else None
    z, traj = gen_mod.integrate(gen, z, times, sc.mode, rng, keep_trajectory, drift)
    return SampleResult(z, times, traj)


# ------------------------------------------------------------------ best of N


@dataclass
class BestOfN:
    sample: np.ndarray  # (d,)
    reward: float
    rewards: np.ndarray  # (N,)


def best_of_n(gen, reward, n: int, config: SamplerConfig = SamplerConfig(),
              rng: np.random.Generator | None = None) -> BestOfN:
    if n < 1:
        raise ValueError("Best-of-N needs N >= 1")
    res = gen_mod.sample(gen, config, n, rng, keep_trajectory=False)
    r = np.asarray(reward(res.samples)).reshape(-1)
    k = int(np.argmax(r))
    return BestOfN(res.samples[k], float(r[k]), r)


# ------------------------------------------------------------------ FK steering


@dataclass
class FkConfig:
    n_particles: int = 4
    n_proposals: int = 1
    resample_steps: frozenset | None = None  # None -> default window
    proposal_steps: frozenset | None = None
    temperature: float = 1.0

    def __post_init__(self):
        if self.n_particles < 1 or self.n_proposals < 1:
            raise ValueError("need N >= 1 and M >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def steps_fk(self, n_steps: int) -> frozenset:
        if self.resample_steps is not None:
            return _check_steps(self.resample_steps, n_steps)
        return default_resample_steps(n_steps)

    def steps_m(self, n_steps: int) -> frozenset:
        if self.proposal_steps is not None:
            return _check_steps(self.proposal_steps, n_steps)
        return default_proposal_steps(n_steps)


def _check_steps(steps, n_steps: int) -> frozenset:
    steps = frozenset(int(k) for k in steps)
    if any(k < 0 or k >= n_steps for k in steps):
        raise ValueError(f"step indices must lie in 0..{n_steps - 1}")
    return steps


def default_resample_steps(n_steps: int) -> frozenset:
    """Every 4th step inside the middle 60% of the grid."""
    lo, hi = int(round(0.2 * n_steps)), int(round(0.8 * n_steps))
    return frozenset(range(lo, hi, 4))


def default_proposal_steps(n_steps: int) -> frozenset:
    """Every step in the first 40% of the grid."""
    return frozenset(range(int(round(0.4 * n_steps))))


@dataclass
class ParticleSet:
    z: np.ndarray  # (N, d)
    last_value: np.ndarray  # (N,), nan until first evaluated
    ancestry: list = field(default_factory=list)  # (step, ancestor indices)

    def __post_init__(self):
        if self.z.shape[0] < 1:
            raise ValueError("a particle set needs N >= 1")


@dataclass
class Counters:
    full_evals: float = 0.0
    prefix_evals: float = 0.0
    estimator_evals: float = 0.0
    decoder_evals: float = 0.0
    flops: float = 0.0

    def charge_generator(self, n: int, flops_each: float) -> None:
        self.full_evals += n
        self.flops += n * flops_each

    def charge_estimator(self, n: int, cost: EvalCost) -> None:
        self.estimator_evals += n
        self.full_evals += n * cost.full_evals
        self.prefix_evals += n * cost.prefix_evals
        self.decoder_evals += n * cost.decoder_evals
        self.flops += n * cost.flops

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class FkResult:
    particles: np.ndarray
    values: np.ndarray
    ancestry: list
    counters: Counters
    times: np.ndarray


def resample_indices(potentials: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Multinomial ancestor draw from normalized ``potentials``.

    Falls back to uniform weights (with a warning) when they are all zero
    or not finite.
    """
    w = np.asarray(potentials, dtype=np.float64)
    if not np.all(np.isfinite(w)) or np.any(w < 0) or w.sum() <= 0.0:
        warnings.warn("degenerate resampling weights; using uniform ancestors",
                      DegenerateWeightsWarning, stacklevel=2)
        w = np.ones_like(w)
    return kernels.inverse_cdf(w / w.sum(), np.ascontiguousarray(uniforms, dtype=np.float64))


def softmax_potentials(log_g: np.ndarray) -> np.ndarray:
    log_g = np.asarray(log_g, dtype=np.float64)
    finite = np.isfinite(log_g)
    if not finite.any():
        return np.zeros_like(log_g)
    g = np.where(finite, np.exp(log_g - log_g[finite].max()), 0.0)
    return g / g.sum()


def _gen_flops(gen) -> float:
    return float(gen.flops()) if hasattr(gen, "flops") else 0.0


def fk_steer(gen, estimator: ValueEstimator, config: FkConfig, sampler: SamplerConfig = SamplerConfig(),
             seed: int | None = None) -> FkResult:
    """FK steering with optional M-proposal scaling.

    Proposal and resampling noise is keyed by ``(step, particle)`` so that
    runs with different ``M`` share their first proposal.
    """
    if sampler.mode != "sde":
        raise ValueError("FK steering needs the stochastic sampler")
    seed = sampler.seed if seed is None else seed
    streams = NoiseStreams(seed)
    n, m, d = config.n_particles, config.n_proposals, gen.data_dim
    times = schedule.time_grid(sampler.n_steps)
    s_fk = config.steps_fk(sampler.n_steps)
    s_m = config.steps_m(sampler.n_steps) if m > 1 else frozenset()
    ps = ParticleSet(streams.initial(n, d), np.full(n, np.nan))
    cnt = Counters()
    gflops = _gen_flops(gen)
    for k in range(sampler.n_steps):
        t, t_next = float(times[k]), float(times[k + 1])
        a, b, c = schedule.sde_step_coeffs(t, t_next)
        if k in s_fk and np.isnan(ps.last_value).any():
            ps.last_value = estimator.value(ps.z, t)
            cnt.charge_estimator(n, estimator.cost(t))
        v_before = ps.last_value
        u = gen.velocity(ps.z, t)
        cnt.charge_generator(n, gflops)
        if k in s_m:
            noise = streams.step(k, n, d, m)
            props = (a * ps.z + b * u)[:, None, :] + c * noise  # (n, m, d)
            vals = estimator.value(props.reshape(n * m, d), t_next).reshape(n, m)
            cnt.charge_estimator(n * m, estimator.cost(t_next))
            best = np.argmax(vals, axis=1)
            ps.z = props[np.arange(n), best]
            ps.last_value = vals[np.arange(n), best]
        else:
            noise = streams.step(k, n, d, 1)[:, 0]
            ps.z = a * ps.z + b * u + c * noise
        if not np.all(np.isfinite(ps.z)):
            raise IntegrationError(k)
        if k in s_fk:
            if k not in s_m:
                ps.last_value = estimator.value(ps.z, t_next)
                cnt.charge_estimator(n, estimator.cost(t_next))
            g = softmax_potentials((ps.last_value - v_before) / config.temperature)
            uniforms = streams.rng(k + 1, RESAMPLE_KEY).uniform(size=n)
            idx = resample_indices(g, uniforms)
            ps.z = ps.z[idx]
            ps.last_value = ps.last_value[idx]
            ps.ancestry.append((k, idx))
    return FkResult(ps.z, ps.last_value, ps.ancestry, cnt, times)


@dataclass
class BudgetReport:
    per_eval: EvalCost  # one estimator evaluation at mid-trajectory
    totals: Counters


def compute_budget(fk_config: FkConfig, sampler: SamplerConfig, estimator: ValueEstimator, gen=None) -> BudgetReport:
    """Evaluation counts an :func:`fk_steer` run with these settings will incur."""
    n, m = fk_config.n_particles, fk_config.n_proposals
    times = schedule.time_grid(sampler.n_steps)
    s_fk = fk_config.steps_fk(sampler.n_steps)
    s_m = fk_config.steps_m(sampler.n_steps) if m > 1 else frozenset()
    cnt = Counters()
    gflops = _gen_flops(gen) if gen is not None else 0.0
    primed = False
    for k in range(sampler.n_steps):
        t, t_next = float(times[k]), float(times[k + 1])
        if k in s_fk and not primed:
            cnt.charge_estimator(n, estimator.cost(t))
        cnt.charge_generator(n, gflops)
        if k in s_m:
            cnt.charge_estimator(n * m, estimator.cost(t_next))
            primed = True
        if k in s_fk:
            if k not in s_m:
                cnt.charge_estimator(n, estimator.cost(t_next))
            primed = True
    return BudgetReport(estimator.cost(0.5), cnt)
