"""Collects the acceptance gate lines and repeats them at the end of the run."""
import pytest

GATE_LINES: list[str] = []


@pytest.fixture(scope="session")
def gate():
    def record(number: str, name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} [{number}] {name}: {detail}"
        print(line)
        GATE_LINES.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in GATE_LINES:
            terminalreporter.write_line(line)
