import numpy as np
import pytest

from mscalib import dgm
from mscalib.msm_data import Cohort, SubjectHistory, TransitionStructure


@pytest.fixture(scope="session")
def five_state():
    return dgm.dgm1_config().structure


@pytest.fixture(scope="session")
def illness_death():
    # 1 healthy, 2 ill, 3 dead
    return TransitionStructure(3, [(1, 2), (1, 3), (2, 3)])


@pytest.fixture(scope="session")
def two_state():
    return TransitionStructure(2, [(1, 2)])


def random_cohort(structure, n, rng, censor_rate=0.5, tie_grid=None, horizon=1.0):
    """Uncovariated random cohort on ``structure`` with exponential transitions.

    ``tie_grid`` rounds all times up to a grid so that ties occur.
    ``censor_rate=0`` gives an uncensored cohort.
    """
    subjects = []
    for i in range(n):
        path = [(1, 0.0)]
        t = 0.0
        cens = rng.exponential(1 / censor_rate) if censor_rate > 0 else np.inf
        if tie_grid:
            cens = np.ceil(cens / tie_grid) * tie_grid
        state = 1
        while structure.successors(state):
            succ = structure.successors(state)
            dt = rng.exponential(1.0)
            if tie_grid:
                dt = max(tie_grid, np.ceil(dt / tie_grid) * tie_grid)
            nxt = succ[rng.integers(len(succ))]
            if t + dt > cens:
                break
            t += dt
            path.append((nxt, t))
            state = nxt
        absorbed = structure.is_absorbing(state)
        if absorbed:
            censor = None
        elif np.isinf(cens):
            censor = t + 10.0 * horizon + 100.0
        else:
            censor = max(cens, t)
        subjects.append(SubjectHistory(i + 1, tuple(path), censor, (float(rng.standard_normal()),)))
    return Cohort(structure, subjects)


@pytest.fixture(scope="session")
def nic_cohort():
    config = dgm.dgm1_config(dgm.Scenario.named("NIC"))
    return config, dgm.simulate_cohort(config, None, 4000, 11)


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
