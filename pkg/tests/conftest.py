"""Shared pytest configuration.

Acceptance tests register one verdict per criterion; a terminal-summary
hook prints them as a single PASS/FAIL line each at the end of the run.
"""
from __future__ import annotations

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for criterion in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[criterion]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{criterion} {status}  {detail}")
