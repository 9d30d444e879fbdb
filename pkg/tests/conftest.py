"""Collects one result line per acceptance criterion and prints them at the end of the run."""
import pytest

_LINES = []


@pytest.fixture
def report():
    def record(number, passed, detail, status=None):
        status = status or ("PASS" if passed else "FAIL")
        line = f"criterion {number:>2}: {status} {detail}"
        _LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
