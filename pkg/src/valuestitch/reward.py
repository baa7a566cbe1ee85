"""Clean-space reward models: the exact linear reward and a sliceable MLP surrogate."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .analytic import LinearReward
from .generator import TrainingError


class NoFeaturesError(TypeError):
    pass


class RewardModel:
    """Either an exact :class:`LinearReward` or a learned scalar-output MLP."""

    def __init__(self, analytic: LinearReward | None = None, net: nn.Mlp | None = None):
        if (analytic is None) == (net is None):
            raise ValueError("a RewardModel wraps exactly one of analytic / net")
        if net is not None and net.widths[-1] != 1:
            raise nn.ShapeError("learned reward needs a scalar output head")
        self.analytic = analytic
        self.net = net

    @property
    def variant(self) -> str:
        return "analytic" if self.analytic is not None else "learned"

    @property
    def depth(self) -> int:
        if self.net is None:
            raise NoFeaturesError("the analytic reward has no layers")
        return self.net.depth

    @property
    def data_dim(self) -> int:
        return self.net.widths[0] if self.net is not None else self.analytic.a.size

    def __call__(self, z0) -> np.ndarray:
        z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
        if self.analytic is not None:
            return self.analytic(z0)
        return self.net.forward(z0)[0][:, 0]

    def grad(self, z0) -> np.ndarray:
        z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
        if self.analytic is not None:
            return self.analytic.grad(z0)
        _, tape = self.net.forward(z0)
        _, dx = self.net.backward(tape, np.ones((z0.shape[0], 1)))
        return dx

    def features(self, z0, j: int) -> np.ndarray:
        """Input to layer ``j``: activations after layer ``j - 1`` (the raw input for ``j = 1``)."""
        if self.net is None:
            raise NoFeaturesError("the analytic reward has no layers to slice")
        if not 1 <= j <= self.net.depth:
            raise IndexError(f"slice index {j} outside 1..{self.net.depth}")
        z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
        if j == 1:
            if z0.shape[1] != self.net.widths[0]:
                raise nn.ShapeError("input width mismatch")
            return z0.copy()
        return self.net.forward_truncated(z0, j - 1)

    def feature_width(self, j: int) -> int:
        return self.net.widths[j - 1]

    def save(self, path, opt: nn.AdamW | None = None, meta: dict | None = None) -> None:
        if self.net is None:
            raise NoFeaturesError("only learned rewards are checkpointed")
        nn.save_checkpoint(path, self.net, opt, {"role": "reward", **(meta or {})})

    @classmethod
    def load(cls, path) -> "RewardModel":
        net, _, meta = nn.load_checkpoint(path)
        if meta.get("role") != "reward":
            raise nn.CheckpointFormatError(f"{path} is not a reward checkpoint")
        return cls(net=net)


def reward_features(model: RewardModel, z0, j: int) -> np.ndarray:
    return model.features(z0, j)


@dataclass
class RewardFitConfig:
    steps: int = 6000
    batch: int = 256
    lr: float = 3e-3
    final_lr_frac: float = 0.01
    hidden: tuple = (64, 64, 64)
    box: float = 4.5
    seed: int = 0


@dataclass
class FitReport:
    max_abs_error: float
    mean_abs_error: float
    history: list


def _cosine_lr(cfg, step: int) -> float:
    frac = step / max(cfg.steps - 1, 1)
    lo = cfg.lr * cfg.final_lr_frac
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * frac))


def train_reward_surrogate(data_sampler: Callable | None, target: Callable, data_dim: int,
                           config: RewardFitConfig = RewardFitConfig(),
                           rng: np.random.Generator | None = None) -> tuple[RewardModel, FitReport]:
    """Regress an MLP onto ``target`` by mean squared error.

    ``data_sampler(n, rng)`` supplies training inputs; ``None`` draws uniformly
    from the box ``[-box, box]^d``. Fit quality is measured on a held-out
    uniform grid over ``[-4, 4]^d``.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if data_sampler is None:
        def data_sampler(n, r):
            return r.uniform(-config.box, config.box, size=(n, data_dim))
    net = nn.Mlp.init([data_dim, *config.hidden, 1], rng)
    opt = nn.AdamW(lr=config.lr)
    params = net.params()
    history = []
    for step in range(config.steps):
        x = data_sampler(config.batch, rng)
        y = np.asarray(target(x), dtype=np.float64).reshape(-1, 1)
        pred, tape = net.forward(x)
        resid = pred - y
        loss = float(np.mean(resid * resid))
        if not math.isfinite(loss):
            raise TrainingError(f"reward fit diverged at step {step}")
        grads, _ = net.backward(tape, 2.0 * resid / x.shape[0], need_input_grad=False)
        opt.step(params, grads, lr=_cosine_lr(config, step))
        net.mark_updated()
        history.append(loss)
    model = RewardModel(net=net)
    return model, evaluate_fit(model, target, data_dim, history)


def evaluate_fit(model: RewardModel, target: Callable, data_dim: int, history=None) -> FitReport:
    n_side = {1: 200, 2: 41}.get(data_dim, 6)
    axes = [np.linspace(-4.0, 4.0, n_side)] * data_dim
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, data_dim)
    err = np.abs(model(grid) - np.asarray(target(grid)).reshape(-1))
    return FitReport(float(err.max()), float(err.mean()), history or [])
