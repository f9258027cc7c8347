"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

TITLES = {
    1: "gradient suite",
    2: "degeneration to Conv-LSTM",
    3: "metric oracle",
    4: "Moran's I",
    5: "loss arithmetic",
    6: "de-biasing direction",
    7: "baseline sanity",
    8: "calendar rules",
    9: "determinism and persistence",
}

_outcomes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number this test covers")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes.setdefault(n, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(TITLES):
        results = _outcomes.get(n)
        if not results:
            status = "NOT RUN"
        elif all(r == "passed" for r in results):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n} ({TITLES[n]}): {status}")
