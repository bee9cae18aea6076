import numpy as np
import pytest

from ctxrs.core import ProblemInstance, SamplingState, plug_in_variance

# Filled by the acceptance tests and echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def random_state(n, m, seed, t_low=2, t_high=9, scale=5.0):
    """Sufficient statistics of normal draws with random cell means and counts."""
    rng = np.random.default_rng(seed)
    state = SamplingState.empty(n, m)
    means = rng.normal(0.0, scale, size=(n, m))
    sd = rng.uniform(0.5, 2.0, size=(n, m))
    for i in range(n):
        for j in range(m):
            t = int(rng.integers(t_low, t_high + 1))
            y = means[i, j] + sd[i, j] * rng.standard_normal(t)
            state.counts[i, j] = t
            state.sums[i, j] = y.sum()
            state.sumsq[i, j] = (y * y).sum()
    return state, plug_in_variance(state)


def random_params(K, L, seed, scale=5.0):
    from ctxrs.mixture import MixtureParams
    rng = np.random.default_rng(seed)
    tau = rng.dirichlet(np.ones(K))
    omega = rng.dirichlet(np.ones(L))
    return MixtureParams(tau, omega, rng.normal(0, scale, (K, L)), rng.uniform(0.5, 4.0, (K, L)))


@pytest.fixture
def three_by_two():
    """Fixed 3-design x 2-context instance with gaps of at least three sampling SDs."""
    return ProblemInstance(np.array([[0.0], [1.0]]),
                           np.array([[9.0, 3.0], [6.0, 9.0], [3.0, 6.0]]),
                           np.array([[1.0, 0.8], [0.8, 1.0], [0.6, 0.9]]))
