from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402
from omgs.synthetic import fixture_cases, fixture_snapshot, structured_fixture_cases  # noqa: E402

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def frozen():
    return json.loads((DATA / "frozen_oracles.json").read_text())


@pytest.fixture(scope="session")
def snapshot():
    return fixture_snapshot()


@pytest.fixture(scope="session")
def raw_cases():
    return fixture_cases()


@pytest.fixture(scope="session")
def cases(raw_cases):
    return structured_fixture_cases(raw_cases)


@pytest.fixture(scope="session")
def case_by_id(cases):
    return {c.case_id: c for c in cases}


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES):
            terminalreporter.write_line(line)
