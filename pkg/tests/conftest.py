import pytest

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance(request):
    """``acceptance(number, passed, detail)`` records one criterion verdict for the summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
