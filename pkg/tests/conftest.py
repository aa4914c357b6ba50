import pytest

RESULTS: list[str] = []


@pytest.fixture
def record():
    """Print and keep one PASS/FAIL line per acceptance criterion."""
    def _record(n: int, name: str, ok: bool, detail: str):
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        RESULTS.append(line)
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
