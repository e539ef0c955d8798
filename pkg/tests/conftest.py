import pytest

_RESULTS = pytest.StashKey[dict]()
CRITERIA = range(1, 11)


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture()
def criterion(request):
    """``criterion(n, ok, detail)`` records an acceptance result, then asserts it."""
    results = request.config.stash[_RESULTS]

    def check(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        results[number] = line
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        terminalreporter.write_line(results.get(n, f"criterion {n:>2}: FAIL  no result recorded (test errored or skipped)"))
