"""Shared pytest hooks: a per-criterion verdict line for the release-gate
tests in test_acceptance.py, printed after the normal summary."""

import re

_CRITERION = re.compile(r"test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = {}
    for status, label in (
        ("passed", "PASS"),
        ("failed", "FAIL"),
        ("error", "FAIL"),
        ("skipped", "FAIL"),
    ):
        for report in terminalreporter.stats.get(status, []):
            match = _CRITERION.search(getattr(report, "nodeid", "") or "")
            if match is None:
                continue
            num = int(match.group(1))
            if verdicts.get(num) != "FAIL":
                verdicts[num] = label
    if verdicts:
        terminalreporter.write_sep("-", "acceptance criteria")
        for num in sorted(verdicts):
            terminalreporter.write_line(f"CRITERION {num} {verdicts[num]}")
