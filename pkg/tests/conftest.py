import logging

import numpy as np
import pytest

from mcre.envs import GridWorld, PointMass
from mcre.mdp import TabularMdp, random_mdp


@pytest.fixture(autouse=True)
def _quiet_fill_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="mcre.data")


@pytest.fixture
def small_mdp():
    return random_mdp(6, 3, 0.9, seed=11)


@pytest.fixture
def two_state_mdp():
    # s0 --a0--> s0 (r=1), s0 --a1--> s1 (r=0); s1 absorbing with r=2
    p = np.zeros((2, 2, 2))
    p[0, 0, 0] = 1.0
    p[0, 1, 1] = 1.0
    p[1, :, 1] = 1.0
    r = np.array([[1.0, 0.0], [2.0, 2.0]])
    return TabularMdp(p, r, 0.5, initial_dist=np.array([1.0, 0.0]))


@pytest.fixture(scope="session")
def grid():
    return GridWorld()


@pytest.fixture(scope="session")
def pointmass():
    return PointMass()


def value_iteration_q(mdp, pi, iters=None):
    """Plain fixed-point iteration of the policy backup, used as an oracle."""
    q = np.zeros((mdp.n_states, mdp.n_actions))
    idx = np.arange(mdp.n_states)
    iters = iters or int(np.ceil(np.log(1e-14) / np.log(max(mdp.gamma, 1e-3)))) + 10
    for _ in range(iters):
        q = mdp.reward + mdp.gamma * mdp.transition @ q[idx, pi]
    return q


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
