"""Shared pytest config: a per-criterion summary for the acceptance suite.

Each acceptance test registers a one-line detail string while it runs; the
terminal summary prints one PASS/FAIL line per criterion, with details,
after the normal pytest output.
"""

from __future__ import annotations

import pytest

ACCEPTANCE_FILE = "test_acceptance.py"

_details: dict[str, str] = {}
_outcomes: dict[str, str] = {}


@pytest.fixture
def acceptance_log(request):
    """Callable for acceptance tests to attach measured numbers to their line."""

    def log(detail: str) -> None:
        _details[request.node.nodeid] = detail

    return log


def _criterion_name(nodeid: str) -> str:
    name = nodeid.split("::")[-1]
    return name.removeprefix("test_").replace("_", "-")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if ACCEPTANCE_FILE not in item.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes[item.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _outcomes:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for nodeid in sorted(_outcomes):
        outcome = _outcomes[nodeid]
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(
            outcome, outcome.upper()
        )
        detail = _details.get(nodeid, "")
        suffix = f" — {detail}" if detail else ""
        terminalreporter.write_line(f"[{status}] {_criterion_name(nodeid)}{suffix}")
