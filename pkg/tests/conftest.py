
import pytest

_LINES: list[tuple[int, str]] = []

@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and return the flag."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}"
        _LINES.append((number, line))
        print(line)
        return ok
    return record

def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES, key=lambda item: item[0]):
        terminalreporter.write_line(line)
