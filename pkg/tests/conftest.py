import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import helpers  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if helpers.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in helpers.RESULTS:
            terminalreporter.write_line(line)
