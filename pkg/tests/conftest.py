import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; returns whether it passed."""

    def record(number, passed, detail):
        line = f"AC{number:<3} {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[_LINES].append(line)
        print(line)
        return passed

    return record


@pytest.fixture
def note(request):
    def record(label, detail):
        line = f"{label:<6} INFO  {detail}"
        request.config.stash[_LINES].append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_LINES]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: (len(s.split()[0]), s)):
            terminalreporter.write_line(line)
