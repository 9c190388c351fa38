"""Prints the acceptance verdict table after every run."""

import re

_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = {}
    for outcome, verdict in (("passed", "PASS"), ("failed", "FAIL"),
                             ("error", "FAIL")):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _PATTERN.search(rep.nodeid)
            if m:
                rows[int(m.group(1))] = (verdict, m.group(2).replace("_", " "))
    if not rows:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria")
    for num in sorted(rows):
        verdict, title = rows[num]
        terminalreporter.write_line(f"[criterion {num}] {verdict} - {title}")
