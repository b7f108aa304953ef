"""Collects one pass/fail line per acceptance criterion and prints them at the end."""
import pytest

_LINES: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call":
        return
    number, title = mark.args
    detail = "; ".join([f"{k}={v}" for k, v in item.user_properties] + [f"seconds={report.duration:.1f}"])
    status = "PASS" if report.passed else "FAIL"
    line = f"criterion {number} {status}: {title}" + f" ({detail})"
    _LINES[number] = line
    print(f"\n{line}")


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_LINES):
        terminalreporter.write_line(_LINES[number])
