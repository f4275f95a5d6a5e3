"""Shared test plumbing: the acceptance reporter.

Acceptance tests record one PASS/FAIL line per criterion; the lines are
echoed in a terminal section after the run so they are visible without -s.
"""

import pytest


class AcceptanceReport:
    def __init__(self):
        self.lines: list[str] = []

    def record(self, criterion: str, description: str, ok: bool, detail: str = ""):
        status = "PASS" if ok else "FAIL"
        line = f"{criterion} {status}: {description}"
        if detail:
            line += f" ({detail})"
        self.lines.append(line)
        assert ok, line


_REPORT = AcceptanceReport()


@pytest.fixture(scope="session")
def acceptance_report():
    return _REPORT


def pytest_terminal_summary(terminalreporter):
    if _REPORT.lines:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT.lines:
            terminalreporter.line(line)
