import numpy as np
import pytest

# criterion number -> title, filled from @pytest.mark.criterion markers at collection
_TITLES = {}
_NODE_CRITERION = {}
_OUTCOMES = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _TITLES[number] = title
            _NODE_CRITERION[item.nodeid] = number


def pytest_runtest_logreport(report):
    number = _NODE_CRITERION.get(report.nodeid)
    if number is None:
        return
    if report.when == "call" or report.outcome != "passed":
        reason = ""
        if report.skipped and isinstance(report.longrepr, tuple):
            reason = report.longrepr[2].removeprefix("Skipped: ")
        _OUTCOMES.setdefault(number, []).append((report.outcome, reason))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_TITLES):
        results = _OUTCOMES.get(number, [])
        outcomes = {o for o, _ in results}
        if not results:
            status = "NOT RUN"
        elif "failed" in outcomes:
            status = "FAIL"
        elif outcomes == {"passed", "skipped"}:
            status = "PARTIAL"
        elif "passed" in outcomes:
            status = "PASS"
        else:
            status = "SKIP"
        line = f"criterion {number:>2} {status:<7} {_TITLES[number]}"
        reasons = sorted({r for o, r in results if o == "skipped" and r})
        if reasons:
            line += f" ({'; '.join(reasons)})"
        terminalreporter.write_line(line)
