import sys
from pathlib import Path

import pytest

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
sys.path.insert(0, str(HERE))

from markedwalk import load_dual_graph  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def fixtures():
    return FIXTURES


@pytest.fixture(scope="session")
def grid4():
    return load_dual_graph(FIXTURES / "grid4x4.json")


@pytest.fixture(scope="session")
def grid4_votes():
    return load_dual_graph(FIXTURES / "grid4x4_votes.json")


@pytest.fixture(scope="session")
def grid23():
    return load_dual_graph(FIXTURES / "grid2x3.json")


@pytest.fixture(scope="session")
def c4():
    return load_dual_graph(FIXTURES / "c4.json")


@pytest.fixture(scope="session")
def p4():
    return load_dual_graph(FIXTURES / "p4.json")
