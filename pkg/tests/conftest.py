import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    from acceptance_support import RESULTS, TITLES, status_line

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in TITLES:
        terminalreporter.write_line(status_line(number))
