import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# criterion number -> (status, title, detail), filled while acceptance tests run
_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result()._criterion = tuple(marker.args)


def pytest_runtest_logreport(report):
    criterion = getattr(report, "_criterion", None)
    if criterion is None:
        return
    # setup and teardown only matter when they fail or skip
    if report.when != "call" and report.passed:
        return
    number, title = criterion
    status = "SKIP" if report.skipped else "PASS" if report.passed else "FAIL"
    if number not in _criteria or status != "PASS":
        _criteria[number] = (status, title, dict(report.user_properties).get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, title, detail = _criteria[number]
        terminalreporter.write_line(f"criterion {number} [{status}] {title}: {detail}")
