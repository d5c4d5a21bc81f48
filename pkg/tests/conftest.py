import sys
from collections import defaultdict
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "small-instance oracle equivalence",
    2: "delivery rate",
    3: "delay match",
    4: "AoI curve",
    5: "optimizer",
    6: "property suites",
}

_outcomes = defaultdict(list)  # criterion -> [(clause, passed)]


def pytest_runtest_logreport(report):
    mark = getattr(report, "criterion", None)
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes[mark[0]].append((mark[1], report.passed))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        clauses = _outcomes[n]
        failed = [c for c, ok in clauses if not ok]
        status = "PASS" if not failed else "FAIL"
        line = f"criterion {n} ({CRITERIA.get(n, '?')}): {status}"
        if failed:
            line += " | failing: " + "; ".join(failed)
        tr.write_line(line)
