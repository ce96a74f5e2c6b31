import os
from pathlib import Path

import pytest

GOLDEN = Path(__file__).parent / "golden"

# acceptance test name prefix -> printed label
CRITERIA = {
    "test_criterion_1": "1 benign differential equivalence",
    "test_criterion_2": "2 attack detection corpus",
    "test_criterion_3": "3 shadow-stack capacity 128/129",
    "test_criterion_4": "4 layout fixpoint <= 3 iterations",
    "test_criterion_5": "5 shadow arithmetic index 2 -> 0x2004",
    "test_criterion_6": "6 monitor/oracle differential x10000",
    "test_criterion_7": "7 hardware rule soundness R1-R4,R6",
    "test_criterion_8": "8 overhead methodology",
}
_results: dict[str, str] = {}


def golden(name: str, actual: str) -> str:
    """Return the frozen golden text; UPDATE_GOLDEN=1 rewrites it from ``actual``."""
    path = GOLDEN / name
    if os.environ.get("UPDATE_GOLDEN") == "1" or not path.exists():
        path.write_text(actual)
    return path.read_text()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    for prefix in CRITERIA:
        if item.name.startswith(prefix):
            if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
                status = "PASS" if rep.outcome == "passed" else "FAIL"
                if _results.get(prefix) != "FAIL":
                    _results[prefix] = status


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for prefix, label in CRITERIA.items():
        if prefix in _results:
            terminalreporter.write_line(f"{_results[prefix]}  criterion {label}")
