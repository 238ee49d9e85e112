import pytest

ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def report_line():
    """Record a one-line acceptance verdict; all lines are echoed in the terminal summary."""

    def record(key, text):
        ACCEPTANCE_LINES[key] = text
        print(text)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
