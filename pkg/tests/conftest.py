import pytest

_OUTCOMES = {}


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or report.failed or report.skipped:
        prev = _OUTCOMES.get(crit, "PASS")
        _OUTCOMES[crit] = "PASS" if prev == "PASS" and report.passed else ("SKIP" if report.skipped else "FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), status in sorted(_OUTCOMES.items()):
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}")
