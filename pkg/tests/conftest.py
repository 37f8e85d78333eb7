import numpy as np
import pytest

from skelpaint.skeleton_data import SkeletonSequence, SequenceMeta


def make_sequence(T=4, M=1, J=3, seed=0, label=None):
    rng = np.random.default_rng(seed)
    joints = rng.normal(size=(T, M, J, 3))
    return SkeletonSequence(joints, tuple(range(1, M + 1)), SequenceMeta(label=label))


@pytest.fixture
def seq_factory():
    return make_sequence


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
