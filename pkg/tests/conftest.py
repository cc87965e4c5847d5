"""Shared pytest plumbing: acceptance-criterion reporting.

The acceptance suite registers one verdict per criterion through the
``criterion`` fixture; a terminal-summary hook prints them as one PASS/FAIL
line each at the end of the run, whether or not stdout capture is active.
"""

from __future__ import annotations

import pytest

_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record and assert one acceptance criterion verdict.

    Usage: ``criterion(name, ok, detail)`` — appends to the run summary and
    fails the test when ``ok`` is false.
    """

    def record(name: str, ok, detail: str) -> None:
        ok = bool(ok)
        _RESULTS.append((name, ok, detail))
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, ok, detail in _RESULTS:
        terminalreporter.write_line(
            f"{'PASS' if ok else 'FAIL'}  {name} — {detail}")
