"""Acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary."""

import contextlib
import time

import pytest

RESULTS: list[str] = []


class Criterion:
    def __init__(self, name: str):
        self.name = name
        self.details: list[str] = []

    def note(self, text: str):
        self.details.append(text)


@pytest.fixture
def criterion():
    @contextlib.contextmanager
    def run(name: str):
        c = Criterion(name)
        start = time.perf_counter()
        try:
            yield c
        except BaseException as exc:
            c.note(f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            _record("FAIL", c, time.perf_counter() - start)
            raise
        _record("PASS", c, time.perf_counter() - start)

    return run


def _record(status, c, elapsed):
    line = f"{status}  {c.name}  [{elapsed:.1f} s]"
    if c.details:
        line += "  " + "; ".join(c.details)
    RESULTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
