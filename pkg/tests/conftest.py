"""Shared fixtures and the acceptance-criteria report hook.

The acceptance tests record one verdict line per criterion; printing them
from a terminal-summary hook keeps them visible in plain ``pytest -v``
output, where per-test stdout would be swallowed by capture.
"""

CRITERION_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion-{number}: {detail}"
    CRITERION_LINES.append(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES):
            terminalreporter.write_line(line)
