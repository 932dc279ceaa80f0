"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_results: dict[str, list[bool]] = {}
_details: dict[str, list[str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    report = outcome.get_result()
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _results.setdefault(marker.args[0], []).append(report.passed)
        _details.setdefault(marker.args[0], []).extend(
            f"{k}={v}" for k, v in report.user_properties if report.when == "call")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _results.items():
        status = "PASS" if all(outcomes) else "FAIL"
        extra = "; ".join(_details.get(name, []))
        line = f"{status}  {name}  ({sum(outcomes)}/{len(outcomes)} checks passed)"
        terminalreporter.write_line(line + (f"  [{extra}]" if extra else ""))
