import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_ACCEPTANCE_LINES = []


@pytest.fixture
def report_line():
    """Record a one-line PASS/FAIL result for the terminal summary."""

    def add(ok: bool, name: str, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} [{name}] {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
