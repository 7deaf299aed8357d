"""Per-criterion PASS/FAIL summary for the acceptance suite.

Acceptance tests are named ``test_cNN_<what>``; a criterion passes when every
test carrying its number passed.
"""

from __future__ import annotations

import re

_OUTCOMES: dict[int, list[bool]] = {}
_NAME = re.compile(r"test_acceptance\.py::test_c(\d\d)_")


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if m is None:
        return
    if report.when == "call" or report.outcome == "failed":
        _OUTCOMES.setdefault(int(m.group(1)), []).append(report.outcome == "passed")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if all(_OUTCOMES[n]) else 'FAIL'}")
