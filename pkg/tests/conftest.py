import numpy as np
import pytest

from adatd.mdp import AggregationScheme, Mdp, aggregation_features, random_mdp, tabular_features


def two_state(reward=None, discount=0.9):
    P = np.array([[0.9, 0.1], [0.2, 0.8]])
    R = np.zeros((2, 2)) if reward is None else np.asarray(reward, dtype=float)
    return Mdp(P, R, discount)


def benchmark_problem(seed=7, n_states=50, d=10, gamma=0.9):
    mdp = random_mdp(n_states, n_actions=4, seed=seed, discount=gamma)
    return mdp, aggregation_features(n_states, AggregationScheme.contiguous(n_states, d))


@pytest.fixture
def chain2():
    return two_state(reward=np.eye(2))


@pytest.fixture
def small_mdp():
    return random_mdp(5, n_actions=2, seed=3, discount=0.9)


@pytest.fixture
def small_features():
    return aggregation_features(5, AggregationScheme(((0, 1), (2, 3), (4,))))


@pytest.fixture
def tabular5():
    return tabular_features(5)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py" in nodeid and getattr(rep, "when", "call") == "call":
                lines.append((nodeid.split("::")[-1], "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, status in sorted(lines):
            terminalreporter.write_line(f"{status}  {name}")
