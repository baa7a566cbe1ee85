"""Closed-form Gaussian-mixture ground truth under the flow-matching path.

Every quantity here is exact for a mixture ``p_0 = sum_k w_k N(mu_k, S_k)``
pushed through ``z_t = (1 - t) z_0 + t eps`` and a linear reward
``r(x) = a . x + b``: marginal densities and scores, the Gaussian posterior
``p(z_0 | z_t)`` (a mixture with responsibilities), the standard value
``E[r(z_0) | z_t]``, the soft value ``log E[exp r(z_0) | z_t]`` and the
reward-tilted mixture ``p_0 exp(r) / Z``.

Batched functions take ``z`` with shape ``(n, d)`` (a single ``(d,)`` vector
is also accepted and the leading axis is dropped from the result).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from . import schedule

MAX_DIM = 8
MAX_COMPONENTS = 8


class UndefinedPosteriorError(ValueError):
    """The posterior given ``z_1`` carries no information; quantities are undefined."""


class UnsupportedRewardError(TypeError):
    pass


@dataclass(frozen=True)
class GmmSpec:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d, d)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        cov = np.asarray(self.covariances, dtype=np.float64)
        k, d = mu.shape
        if cov.ndim == 1:
            # per-component scalar variance in 1-D
            cov = cov.reshape(k, 1, 1)
        if cov.ndim == 2:
            # per-component diagonal
            cov = np.stack([np.diag(c) for c in cov])
        if w.shape != (k,) or cov.shape != (k, d, d):
            raise ValueError(f"inconsistent mixture shapes: w{w.shape} mu{mu.shape} cov{cov.shape}")
        if k > MAX_COMPONENTS or d > MAX_DIM:
            raise ValueError(f"mixture limited to K <= {MAX_COMPONENTS}, d <= {MAX_DIM}")
        if np.any(w <= 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0, atol=1e-12):
            raise ValueError("covariances must be symmetric")
        for c in cov:
            np.linalg.cholesky(c)  # raises LinAlgError if not PD
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        chol = np.linalg.cholesky(self.covariances)
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], eps)

    def log_density(self, x) -> np.ndarray:
        return _log_density(self, x)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GmmSpec":
        missing = {"weights", "means", "covariances"} - set(doc)
        if missing:
            raise ValueError(f"mixture document missing keys: {sorted(missing)}")
        return cls(np.array(doc["weights"], float), np.array(doc["means"], float),
                   np.array(doc["covariances"], float))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "GmmSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class LinearReward:
    """``r(x) = a . x + b``."""

    a: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(a)) or not math.isfinite(self.b):
            raise ValueError("reward coefficients must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", float(self.b))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ self.a + self.b

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(self.a, x.shape).copy()

    def scaled(self, lam: float) -> "LinearReward":
        return LinearReward(lam * self.a, lam * self.b)

    def to_dict(self) -> dict:
        return {"a": self.a.tolist(), "b": self.b}

    @classmethod
    def from_dict(cls, doc: dict) -> "LinearReward":
        return cls(np.array(doc["a"], float), float(doc.get("b", 0.0)))


def single_gaussian(mean, cov) -> GmmSpec:
    mean = np.atleast_1d(np.asarray(mean, float))
    cov = np.asarray(cov, float)
    if cov.ndim == 0:
        cov = cov * np.eye(mean.size)
    return GmmSpec(np.ones(1), mean[None], cov[None])


def bimodal_1d() -> GmmSpec:
    """Equal mixture of ``N(-2, 0.25)`` and ``N(2, 0.25)``."""
    return GmmSpec(np.array([0.5, 0.5]), np.array([[-2.0], [2.0]]), np.array([0.25, 0.25]))


# ---------------------------------------------------------------- internals


def _batch(z, d: int) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got {z.shape}")
    return z, single


def _out(x, single):
    return x[0] if single else x


@dataclass
class _Posterior:
    """Per-point, per-component quantities of ``p(z_0 | z_t)``.

    ``resp`` (n, K) responsibilities, ``comp_score`` (n, K, d) component
    scores ``-C_k^{-1}(z - alpha mu_k)``, ``score`` (n, d) marginal score,
    ``mean`` (n, K, d) component posterior means, ``cov`` (K, d, d) component
    posterior covariances, ``gain`` (K, d, d) ``alpha S_k C_k^{-1}``,
    ``cinv`` (K, d, d) and ``log_marginal`` (n,).
    """

    resp: np.ndarray
    log_resp: np.ndarray
    comp_score: np.ndarray
    score: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    gain: np.ndarray
    cinv: np.ndarray
    log_marginal: np.ndarray
    alpha: float
    sigma: float


def _posterior(gmm: GmmSpec, t: float, z: np.ndarray) -> _Posterior:
    al, sg, _, _ = schedule.coeffs(t)
    d = gmm.dim
    eye = np.eye(d)
    c = al * al * gmm.covariances + sg * sg * eye  # (K, d, d)
    chol = np.linalg.cholesky(c)
    cinv = np.linalg.inv(c)
    cinv = 0.5 * (cinv + np.swapaxes(cinv, 1, 2))
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    diff = z[:, None, :] - al * gmm.means[None, :, :]  # (n, K, d)
    sol = np.einsum("kij,nkj->nki", cinv, diff)
    maha = np.einsum("nki,nki->nk", diff, sol)
    log_n = -0.5 * (maha + logdet[None, :] + d * math.log(2.0 * math.pi))
    log_joint = np.log(gmm.weights)[None, :] + log_n
    log_marg = logsumexp(log_joint, axis=1)
    log_resp = log_joint - log_marg[:, None]
    resp = np.exp(log_resp)
    comp_score = -sol
    score = np.einsum("nk,nki->ni", resp, comp_score)
    gain = al * np.einsum("kij,kjl->kil", gmm.covariances, cinv)
    mean = gmm.means[None, :, :] + np.einsum("kij,nkj->nki", gain, diff)
    cov = gmm.covariances - al * np.einsum("kij,kjl->kil", gain, gmm.covariances)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return _Posterior(resp, log_resp, comp_score, score, mean, cov, gain, cinv, log_marg, al, sg)


def _check_posterior_time(t: float) -> float:
    t = float(t)
    if t >= 1.0:
        raise UndefinedPosteriorError("posterior quantities are undefined at t = 1")
    if t < 0.0:
        raise schedule.ScheduleError(f"time {t} outside [0, 1]")
    return t


def _linear(reward) -> LinearReward:
    if not isinstance(reward, LinearReward):
        raise UnsupportedRewardError("closed-form results need a LinearReward")
    return reward


def _log_density(gmm: GmmSpec, x) -> np.ndarray:
    x, single = _batch(x, gmm.dim)
    return _out(_posterior(gmm, 0.0, x).log_marginal, single)


# ---------------------------------------------------------------- public API


def marginal(gmm: GmmSpec, t: float) -> GmmSpec:
    """Mixture parameters of ``p_t``."""
    al, sg, _, _ = schedule.coeffs(t)
    cov = al * al * gmm.covariances + sg * sg * np.eye(gmm.dim)
    return GmmSpec(gmm.weights.copy(), al * gmm.means, cov)


def log_marginal(gmm: GmmSpec, t: float, z) -> np.ndarray:
    z, single = _batch(z, gmm.dim)
    return _out(_posterior(gmm, t, z).log_marginal, single)


def score(gmm: GmmSpec, t: float, z) -> np.ndarray:
    """``grad_z log p_t(z)``."""
    z, single = _batch(z, gmm.dim)
    return _out(_posterior(gmm, t, z).score, single)


def score_hessian(gmm: GmmSpec, t: float, z) -> np.ndarray:
    """Hessian of ``log p_t`` at each point, shape ``(n, d, d)``."""
    z, single = _batch(z, gmm.dim)
    post = _posterior(gmm, t, z)
    outer = np.einsum("nk,nki,nkj->nij", post.resp, post.comp_score, post.comp_score)
    hess = -np.einsum("nk,kij->nij", post.resp, post.cinv) + outer
    hess -= np.einsum("ni,nj->nij", post.score, post.score)
    return _out(hess, single)


def _posterior_mean_any_t(gmm: GmmSpec, t: float, z: np.ndarray) -> tuple[np.ndarray, _Posterior]:
    post = _posterior(gmm, t, z)
    return np.einsum("nk,nki->ni", post.resp, post.mean), post


def posterior_mean(gmm: GmmSpec, t: float, z) -> np.ndarray:
    """The denoiser ``E[z_0 | z_t = z]``."""
    _check_posterior_time(t)
    z, single = _batch(z, gmm.dim)
    return _out(_posterior_mean_any_t(gmm, t, z)[0], single)


def posterior_mean_jacobian(gmm: GmmSpec, t: float, z) -> np.ndarray:
    """``d E[z_0 | z_t] / d z_t`` at each point, shape ``(n, d, d)``. Defined on [0, 1]."""
    z, single = _batch(z, gmm.dim)
    post = _posterior(gmm, t, z)
    rel = post.comp_score - post.score[:, None, :]
    jac = np.einsum("nk,kij->nij", post.resp, post.gain)
    jac += np.einsum("nk,nki,nkj->nij", post.resp, post.mean, rel)
    return _out(jac, single)


def velocity(gmm: GmmSpec, t: float, z) -> np.ndarray:
    """Exact marginal velocity ``E[eps - z_0 | z_t]`` of the FM path, valid on [0, 1]."""
    z, single = _batch(z, gmm.dim)
    t = float(t)
    if t >= 0.5:
        den, _ = _posterior_mean_any_t(gmm, t, z)
        u = (z - den) / t
    else:
        s = _posterior(gmm, t, z).score
        u = -z / (1.0 - t) - (t / (1.0 - t)) * s
    return _out(u, single)


def velocity_jacobian(gmm: GmmSpec, t: float, z) -> np.ndarray:
    """``d u / d z`` of the exact velocity, shape ``(n, d, d)``."""
    z, single = _batch(z, gmm.dim)
    t = float(t)
    eye = np.eye(gmm.dim)[None]
    if t >= 0.5:
        jac = (eye - posterior_mean_jacobian(gmm, t, z)) / t
    else:
        jac = -eye / (1.0 - t) - (t / (1.0 - t)) * score_hessian(gmm, t, z)
    return _out(jac, single)


def value(gmm: GmmSpec, reward: LinearReward, t: float, z) -> np.ndarray:
    """Standard value ``E[r(z_0) | z_t = z]``."""
    reward = _linear(reward)
    _check_posterior_time(t)
    z, single = _batch(z, gmm.dim)
    den, _ = _posterior_mean_any_t(gmm, t, z)
    return _out(reward(den), single)


def _component_soft_terms(post: _Posterior, reward: LinearReward) -> np.ndarray:
    """``a . m_k + a^T P_k a / 2 + b`` per point and component."""
    lin = post.mean @ reward.a + reward.b  # (n, K)
    quad = 0.5 * np.einsum("i,kij,j->k", reward.a, post.cov, reward.a)
    return lin + quad[None, :]


def soft_value(gmm: GmmSpec, reward: LinearReward, t: float, z) -> np.ndarray:
    """Soft value ``log E[exp r(z_0) | z_t = z]`` via per-component Gaussian MGFs."""
    reward = _linear(reward)
    _check_posterior_time(t)
    z, single = _batch(z, gmm.dim)
    post = _posterior(gmm, t, z)
    v = logsumexp(post.log_resp + _component_soft_terms(post, reward), axis=1)
    return _out(v, single)


def reward_variance(gmm: GmmSpec, reward: LinearReward, t: float, z) -> np.ndarray:
    """``Var[r(z_0) | z_t = z]``."""
    reward = _linear(reward)
    _check_posterior_time(t)
    z, single = _batch(z, gmm.dim)
    post = _posterior(gmm, t, z)
    lin = post.mean @ reward.a + reward.b
    comp_var = np.einsum("i,kij,j->k", reward.a, post.cov, reward.a)
    mean = np.sum(post.resp * lin, axis=1)
    second = np.sum(post.resp * (comp_var[None, :] + lin * lin), axis=1)
    return _out(np.maximum(second - mean * mean, 0.0), single)


def value_grad(gmm: GmmSpec, reward: LinearReward, t: float, z) -> np.ndarray:
    """``grad_z E[r(z_0) | z_t = z]``."""
    reward = _linear(reward)
    _check_posterior_time(t)
    z, single = _batch(z, gmm.dim)
    post = _posterior(gmm, t, z)
    lin = post.mean @ reward.a  # (n, K); the offset b drops out of the gradient
    rel = post.comp_score - post.score[:, None, :]
    through_mean = np.einsum("kji,j->ki", post.gain, reward.a)  # gain^T a, (K, d)
    g = np.einsum("nk,nk,nki->ni", post.resp, lin, rel)
    g += post.resp @ through_mean
    return _out(g, single)


def soft_value_grad(gmm: GmmSpec, reward: LinearReward, t: float, z) -> np.ndarray:
    """``grad_z log E[exp r(z_0) | z_t = z]``."""
    reward = _linear(reward)
    _check_posterior_time(t)
    z, single = _batch(z, gmm.dim)
    post = _posterior(gmm, t, z)
    logits = post.log_resp + _component_soft_terms(post, reward)
    w = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    through_mean = np.einsum("kji,j->ki", post.gain, reward.a)
    g = np.einsum("nk,nki->ni", w, post.comp_score) - post.score
    g += w @ through_mean
    return _out(g, single)


def tilted(gmm: GmmSpec, reward: LinearReward) -> GmmSpec:
    """The mixture proportional to ``p_0(x) exp(r(x))``."""
    reward = _linear(reward)
    a = reward.a
    shift = np.einsum("kij,j->ki", gmm.covariances, a)
    log_w = np.log(gmm.weights) + gmm.means @ a + 0.5 * np.einsum("ki,i->k", shift, a)
    w = np.exp(log_w - logsumexp(log_w))
    w = w / w.sum()
    return GmmSpec(w, gmm.means + shift, gmm.covariances.copy())


def log_partition(gmm: GmmSpec, reward: LinearReward) -> float:
    """``log E_{p_0}[exp r(x)]``."""
    reward = _linear(reward)
    a = reward.a
    quad = 0.5 * np.einsum("i,kij,j->k", a, gmm.covariances, a)
    return float(logsumexp(np.log(gmm.weights) + gmm.means @ a + quad) + reward.b)


def sample_posterior(gmm: GmmSpec, t: float, z, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` exact draws from ``p(z_0 | z_t = z)`` for a single point ``z``."""
    _check_posterior_time(t)
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    post = _posterior(gmm, t, _batch(z, gmm.dim)[0])
    p = post.resp[0] / post.resp[0].sum()
    comp = rng.choice(gmm.n_components, size=n, p=p)
    eps = rng.standard_normal((n, gmm.dim))
    # posterior covariance vanishes at t = 0; jitter keeps the factorization defined
    chol = np.stack([_psd_sqrt(c) for c in post.cov])
    return post.mean[0][comp] + np.einsum("nij,nj->ni", chol[comp], eps)


def _psd_sqrt(c: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(c)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))[None, :]


def mc_value_oracle(
    source,
    reward: Callable[[np.ndarray], np.ndarray],
    t: float,
    z,
    n_rollouts: int,
    rng: np.random.Generator,
    *,
    soft: bool = False,
    n_steps: int = 100,
) -> tuple[float, float]:
    """Monte Carlo estimate of the value at a single point, with its standard error.

    ``source`` is a :class:`GmmSpec` (exact posterior draws) or a velocity
    model (time-reversal SDE rollouts from ``(z, t)`` on a grid of ``n_steps`` intervals
    over [0, 1]). With ``soft=True`` the estimate is ``log mean exp r`` and
    the error is propagated by the delta method.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if isinstance(source, GmmSpec):
        z0 = sample_posterior(source, t, z, n_rollouts, rng)
    else:
        from .generator import rollout_from

        z0 = rollout_from(source, np.repeat(z[None, :], n_rollouts, axis=0), t, n_steps, rng)
    r = np.asarray(reward(z0), dtype=np.float64).reshape(-1)
    return summarize_rewards(r, soft=soft)


def summarize_rewards(r: np.ndarray, *, soft: bool = False) -> tuple[float, float]:
    n = r.size
    if not soft:
        se = float(r.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
        return float(r.mean()), se
    m = r.max()
    e = np.exp(r - m)
    mean_e = e.mean()
    est = float(m + math.log(mean_e))
    se = float(e.std(ddof=1) / math.sqrt(n) / mean_e) if n > 1 else float("nan")
    return est, se
