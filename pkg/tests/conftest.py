"""Replay the acceptance gate's per-criterion PASS/FAIL lines after the run.

The criterion tests record one verdict line each while they execute; output
capture hides those for passing tests, so this hook prints the collected
lines in a dedicated section once capture is released.
"""

import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "VERDICT_LINES", None) if mod is not None else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
