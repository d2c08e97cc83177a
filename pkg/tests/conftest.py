import numpy as np
import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(num, title, budget): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or report.when != "call" and not report.failed:
        return
    num, title, budget = mark.args
    prev = _RESULTS.get(num)
    if report.when == "call" or prev is None:
        _RESULTS[num] = (title, budget, report.outcome, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        title, budget, outcome, duration = _RESULTS[num]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(
            f"{status}  [{num:2d}] {title}  ({duration:.1f} s, budget {budget:g} s)"
        )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
