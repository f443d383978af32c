import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tcrl_lab.cmdp import Lattice, TabularCmdp, grid_hazard

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_cmdp(rng, n_states=None, n_actions=None, gamma=None, dim=1):
    """Random tabular CMDP embedded on a 1-D (or 2-D) lattice."""
    S = n_states or int(rng.integers(2, 11))
    A = n_actions or int(rng.integers(1, 5))
    if dim == 1:
        lattice = Lattice.full((S,))
    else:
        w = int(np.ceil(np.sqrt(S)))
        S = w * w
        lattice = Lattice.full((w, w))
    P = rng.random((S, A, S)) ** 3
    P /= P.sum(axis=2, keepdims=True)
    R = rng.normal(size=(S, A))
    C = rng.random((S, A)) * (rng.random((S, A)) < 0.5)
    g = gamma if gamma is not None else float(rng.choice([0.5, 0.9, 0.99]))
    init = np.full(S, 1.0 / S)
    return TabularCmdp(P, R, C, g, 5.0, init, lattice, horizon=50)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid3():
    return grid_hazard(("S.H", "...", "..G"))


@pytest.fixture
def cliff():
    return grid_hazard(("........", "........", "SHHHHHHG"), horizon=200)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE, key=lambda s: (int(s.rstrip("ab")), s)):
            terminalreporter.write_line(f"criterion {k}: {ACCEPTANCE[k]}")
