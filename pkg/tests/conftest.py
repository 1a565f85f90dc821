"""Per-criterion reporting for the acceptance suite."""

import pytest

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): acceptance criterion number k")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    k = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    if report.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
    prev = _CRITERIA.get(k)
    passed = report.passed and (prev is None or prev[0])
    _CRITERIA[k] = (passed, detail if prev is None else f"{prev[1]}; {detail}".strip("; "))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        passed, detail = _CRITERIA[k]
        terminalreporter.write_line(f"CRITERION {k}: {'PASS' if passed else 'FAIL'}  {detail}")
