import sys

import numpy as np
import pytest

from valuestitch import analytic, generator as gen_mod, reward as rew_mod


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bimodal():
    return analytic.bimodal_1d()


@pytest.fixture(scope="session")
def gmm2d():
    return analytic.GmmSpec(np.array([0.3, 0.7]), np.array([[-1.0, 0.5], [1.5, -0.5]]),
                            np.array([[[0.4, 0.1], [0.1, 0.3]], [[0.2, -0.05], [-0.05, 0.5]]]))


@pytest.fixture(scope="session")
def small_gen():
    """A lightly trained 1D generator on the bimodal mixture; enough for contract tests."""
    g = analytic.bimodal_1d()
    rng = np.random.default_rng(7)
    model = gen_mod.VelocityModel.init(1, rng, (32, 32, 32))
    gen_mod.train_fm(model, lambda n, r: g.sample(n, r), gen_mod.FmConfig(steps=600), rng)
    return model


@pytest.fixture(scope="session")
def small_rew():
    rng = np.random.default_rng(8)
    model, _ = rew_mod.train_reward_surrogate(None, analytic.LinearReward(np.array([1.0])), 1,
                                              rew_mod.RewardFitConfig(steps=400, hidden=(16, 16, 16)), rng)
    return model


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
