import numpy as np
import pytest

from tabrecon.hierarchy import CountTable, SpatialHierarchy

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_hierarchy(n3=2, per2=3, per1=4, seed=0) -> SpatialHierarchy:
    rng = np.random.default_rng(seed)
    parent2 = np.repeat(np.arange(n3), per2)
    parent1 = np.repeat(np.arange(n3 * per2), per1)
    cent = rng.random((n3 * per2, 2))
    decile = np.resize(np.arange(1, 11), n3 * per2)
    return SpatialHierarchy.from_arrays(parent1, parent2, cent, decile)


@pytest.fixture
def hier():
    return small_hierarchy()


@pytest.fixture
def truth_table(hier):
    rng = np.random.default_rng(1)
    classes = rng.poisson([3.0, 8.0, 15.0], size=(hier.sizes[0], 3))
    return CountTable.from_level1(hier, classes)
