import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criteria():
    """Registry of one-line acceptance verdicts, echoed in the terminal summary."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[k])
