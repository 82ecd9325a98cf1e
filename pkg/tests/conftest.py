import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion and fail the test on FAIL."""

    def report(number: int, ok: bool, summary: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {summary}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
