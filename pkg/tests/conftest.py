import pytest

_LINES_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_line(request):
    """Records one pass/fail line shown in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES_KEY, [])

    def record(criterion, ok, detail):
        lines.append(f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}")
        print(lines[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section('acceptance criteria')
        for line in lines:
            terminalreporter.write_line(line)
