from __future__ import annotations

import _verdict


def pytest_terminal_summary(terminalreporter):
    if _verdict.LINES:
        terminalreporter.section("acceptance criteria")
        for line in _verdict.LINES:
            terminalreporter.write_line(line)
