"""Shared pytest hooks: the acceptance suite's PASS/FAIL lines are repeated in the terminal summary."""
import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line; call with (number, title, passed, detail, seconds)."""

    def record(number: int, title: str, passed: bool, detail: str, seconds: float) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} | {detail} | {seconds:.1f}s"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
