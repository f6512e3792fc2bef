import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "discrete-law oracle equivalence",
    2: "gamma=0 reduces to cross-fit AIPW",
    3: "EIF has mean zero at the truth",
    4: "remainder is second order",
    5: "Huberization root",
    6: "single-index recovery",
    7: "simulation bias and coverage",
    8: "double-bootstrap coverage",
    9: "birth-weight replication",
    10: "CLI determinism",
}
_RANK = {"PASS": 0, "SKIP": 1, "FAIL": 2}
_status = {}
_details = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): acceptance criterion number k")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when != "call" and rep.outcome == "passed":
        return
    k = mark.args[0]
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
    if _RANK[status] >= _RANK.get(_status.get(k), -1):
        _status[k] = status
    for key, value in item.user_properties:
        if key == "detail":
            _details.setdefault(k, []).append(value)
    if status == "SKIP" and isinstance(rep.longrepr, tuple):
        _details.setdefault(k, []).append(rep.longrepr[2])


def pytest_terminal_summary(terminalreporter):
    if not _status:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        status = _status.get(k, "NOT RUN")
        detail = " | ".join(dict.fromkeys(_details.get(k, [])))
        terminalreporter.write_line(f"criterion {k:2d} {status:4s}  {CRITERIA[k]}" + (f"  [{detail}]" if detail else ""))
