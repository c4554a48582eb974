import pytest

_LINES = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criterion_report(request):
    """Callable ``(number, ok, detail)`` that records one acceptance line."""
    lines = request.config.stash.setdefault(_LINES, {})

    def record(number, ok, detail):
        lines[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
