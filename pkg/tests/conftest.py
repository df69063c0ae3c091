import numpy as np
import pytest

from seil import microsim as sim


@pytest.fixture(scope="session")
def tasks():
    return sim.make_tasks()


@pytest.fixture(scope="session")
def expert_trajs(tasks):
    aug = sim.EnvAugConfig(True, 0.05)
    return [sim.expert_rollout(t, 1000 + i, aug, rollout_idx=i) for i, t in enumerate(tasks)]


def random_state(rng: np.random.Generator) -> sim.SimState:
    blocks = tuple(tuple(float(v) for v in rng.uniform(0, 1, 2)) for _ in range(4))
    return sim.SimState(tuple(float(v) for v in rng.uniform(0, 1, 2)), False, None, blocks, 0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
