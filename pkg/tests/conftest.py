import pytest


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line; the lines are repeated in the terminal summary."""
    lines = request.config._acceptance_lines

    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" | {detail}" if detail else "")
        print(line)
        lines.append((number, line))
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines, key=lambda t: t[0]):
        terminalreporter.write_line(line)
