"""Shared acceptance reporting: one uncapturable pass/fail line per criterion."""

import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record and print a criterion verdict, then enforce it.

    The line lands in the terminal summary as well, so it survives pytest's
    stdout capture on passing tests.
    """

    def record(num: int, passed: bool, detail: str) -> None:
        line = f"criterion {num}: {'PASS' if passed else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
