import numpy as np
import pytest

from neuraltd.env import TabularPolicy, random_mdp, two_state_chain


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def symmetric_chain():
    return two_state_chain(0.9, gamma=0.9, reward=(1.0, -1.0))


@pytest.fixture
def mdp5():
    return random_mdp(5, 2, 0.9, seed=0)


@pytest.fixture
def uniform5():
    return TabularPolicy.uniform(5, 2)


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def acceptance_log(request):
    return request.config.stash[ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
