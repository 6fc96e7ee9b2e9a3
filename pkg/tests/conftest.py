"""Shared pytest configuration.

Tests marked with @pytest.mark.criterion(n, "description") contribute one
line each to an acceptance summary printed at the end of the run.
"""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(n, desc): acceptance criterion test")
    config.addinivalue_line("markers", "slow: long-running test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call":
        n, desc = marker.args
        passed = report.passed and _RESULTS.get(n, (True, desc))[0]
        _RESULTS[n] = (passed, desc)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        passed, desc = _RESULTS[n]
        word = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{word}] criterion {n}: {desc}")
