from pathlib import Path

import pytest

from abtest_sizing.ingest import aggregate, read_sessions

DATA = Path(__file__).parent / "data"

# One line per acceptance check, filled in by tests/test_acceptance.py.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def example_path() -> Path:
    return DATA / "worked_example_sessions.csv"


@pytest.fixture
def example_aggregates(example_path):
    return aggregate(read_sessions(example_path))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
