"""Shared test configuration.

Acceptance tests carry ``@pytest.mark.criterion(n)`` and may attach a
``detail`` property; the terminal summary prints one pass/fail line per
criterion.
"""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        passed = rep.passed
        prev = _OUTCOMES.get(n)
        if prev is not None:
            passed = passed and prev[0]
            detail = "; ".join(d for d in (prev[1], detail) if d)
        _OUTCOMES[n] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        passed, detail = _OUTCOMES[n]
        line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
