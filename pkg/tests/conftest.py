import contextlib

import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line for an acceptance criterion.

    The body sets ``c.detail`` and ``c.passed``; an exception records FAIL and propagates.
    """
    lines = request.config.stash[_LINES_KEY]

    @contextlib.contextmanager
    def record(number, title):
        c = type("Outcome", (), {"detail": "", "passed": False})()
        try:
            yield c
        except BaseException as exc:
            lines.append(f"FAIL criterion {number} ({title}): {type(exc).__name__}: {exc}".splitlines()[0])
            raise
        line = f"{'PASS' if c.passed else 'FAIL'} criterion {number} ({title}): {c.detail}"
        lines.append(line)
        print(line)
        assert c.passed, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
