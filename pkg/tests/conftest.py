import contextlib
import time

import pytest

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def criterion(request):
    """Context manager that records one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash[_VERDICTS]

    @contextlib.contextmanager
    def record(number: int, title: str):
        start = time.perf_counter()
        notes: list[str] = []
        try:
            yield notes
        except BaseException as exc:
            first = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            lines.append((number, f"FAIL  criterion {number:>2}  {title}  ({first})"))
            raise
        took = time.perf_counter() - start
        extra = "; ".join(notes)
        lines.append((number, f"PASS  criterion {number:>2}  {title}  [{took:.1f}s{'; ' + extra if extra else ''}]"))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
