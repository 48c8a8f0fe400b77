import pytest

CRITERIA = {
    1: "protocol correctness",
    2: "fault-free soundness",
    3: "bypass scenario fidelity",
    4: "timing-window reproduction",
    5: "profiling statistics",
    6: "integrity reproduction",
    7: "mitigations",
    8: "reproducibility",
}

_results: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    n = getattr(report, "criterion", None)
    if n is None:
        return
    if report.when == "call" or report.failed:
        _results.setdefault(n, []).append(report.passed and not report.failed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status = "PASS" if all(_results[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n} ({CRITERIA[n]}): {status}")
