import numpy as np
import pytest

from tailtree.tree_core import build_tree

from _helpers import RIVER_EDGES, STUDY_EDGES


@pytest.fixture
def river_tree():
    return build_tree(7, RIVER_EDGES)


@pytest.fixture
def study_tree():
    return build_tree(7, STUDY_EDGES)


@pytest.fixture
def chain3():
    return build_tree(3, [(1, 2), (2, 3)])


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    from _helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
