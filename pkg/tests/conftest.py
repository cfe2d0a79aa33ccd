import numpy as np
import pytest

from periodic_mdp.mdp import Distribution, Policy, SpaceDims, TransitionKernel

ACCEPTANCE_LINES = []


def swap_kernel(horizon, num_actions=1):
    """Two states that exchange places every step, whatever the action."""
    probs = np.zeros((horizon, 2, num_actions, 2))
    probs[:, 0, :, 1] = 1.0
    probs[:, 1, :, 0] = 1.0
    return TransitionKernel(probs)


def self_loop_kernel(dims: SpaceDims):
    probs = np.zeros((dims.horizon, dims.num_states, dims.num_actions, dims.num_states))
    for x in range(dims.num_states):
        probs[:, x, :, x] = 1.0
    return TransitionKernel(probs)


def state_distribution(marginal, num_actions=1):
    """Distribution with the given state marginal, spread evenly over actions."""
    marginal = np.asarray(marginal, dtype=np.float64)
    return Distribution(np.repeat(marginal[:, None] / num_actions, num_actions, axis=1))


def one_action_policy(horizon, num_states):
    return Policy(np.ones((horizon, num_states, 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def report():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
