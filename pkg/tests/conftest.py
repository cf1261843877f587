import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion."""

    def record(number: int, name: str, ok: bool, detail: str):
        line = f"[acceptance {number:2d}] {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
