import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Register an acceptance criterion; its outcome is printed at session end."""
    entry = {"name": None, "node": request.node}
    _ACCEPTANCE.append(entry)

    def named(name):
        entry["name"] = name

    return named


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" or (report.when == "setup" and report.failed):
        for entry in _ACCEPTANCE:
            if entry["node"] is item:
                entry["passed"] = report.passed


def pytest_terminal_summary(terminalreporter):
    rows = [e for e in _ACCEPTANCE if e["name"]]
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for e in rows:
        status = "PASS" if e.get("passed") else "FAIL"
        terminalreporter.write_line(f"[{status}] {e['name']}")
