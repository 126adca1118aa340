import pytest

_LINES = []


@pytest.fixture
def verdict():
    """Records one PASS/FAIL line per acceptance criterion and fails the test on FAIL."""
    def record(number, title, ok, detail="", elapsed=None, limit=None):
        if limit is not None:
            ok = ok and elapsed < limit
        timing = f" [{elapsed:.1f}s" + (f" / limit {limit:g}s]" if limit is not None else "]") \
            if elapsed is not None else ""
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title}: {detail}{timing}"
        _LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
