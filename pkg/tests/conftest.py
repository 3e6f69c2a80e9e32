import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from apo.tabular import TabularMdp, TabularPolicy

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def deterministic_mdp(next_state, reward, init_dist, gamma):
    """MDP with ``next_state[s][a]`` successors and ``reward[s][a]`` payoffs."""
    next_state = np.asarray(next_state)
    n, m = next_state.shape
    trans = np.zeros((n, m, n))
    rew = np.zeros((n, m, n))
    for s in range(n):
        for a in range(m):
            trans[s, a, next_state[s, a]] = 1.0
            rew[s, a, :] = reward[s][a]
    return TabularMdp(trans, rew, np.asarray(init_dist, dtype=float), gamma)


@pytest.fixture
def two_state_chain():
    """s0 -> s1 pays 1, s1 is absorbing with reward 0."""
    return deterministic_mdp([[1], [1]], [[1.0], [0.0]], [1.0, 0.0], 0.9)


@pytest.fixture
def single_action_policy():
    return TabularPolicy(np.ones((2, 1)))


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """``record(name, ok, detail)`` stores one pass/fail line, shown in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, [])

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
