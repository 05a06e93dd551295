import pytest

RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[RESULTS] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; returns whether it passed so tests can assert on it."""
    results = request.config.stash[RESULTS]

    def record(name, passed, detail=""):
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        line = f"{status}  {name}: {detail}"
        results.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[RESULTS]
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
