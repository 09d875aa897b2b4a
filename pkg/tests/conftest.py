"""Collects the outcome of every acceptance criterion and prints one line per criterion."""

import pytest

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _CRITERIA.setdefault(number, {"title": title, "passed": True, "ran": False})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    entry = _CRITERIA[mark.args[0]]
    if report.when == "call" or report.failed:
        entry["ran"] = entry["ran"] or report.when == "call"
        entry["passed"] = entry["passed"] and not report.failed
    detail = getattr(item, "criterion_detail", None)
    if detail:
        entry["detail"] = detail


@pytest.fixture
def detail(request):
    """Attach a short measurement to the criterion line of the running test."""
    def record(text):
        request.node.criterion_detail = text
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "FAIL" if not entry["passed"] else ("PASS" if entry["ran"] else "SKIP")
        line = f"[{status}] criterion {number}: {entry['title']}"
        if entry.get("detail"):
            line += f" ({entry['detail']})"
        terminalreporter.write_line(line)
