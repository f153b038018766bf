"""Collects one verdict line per acceptance criterion and prints them after the run."""

import pytest

VERDICTS = {}


@pytest.fixture
def verdict():
    def record(key, ok, detail):
        VERDICTS[key] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS, key=lambda k: int(k[1:])):
        ok, detail = VERDICTS[key]
        terminalreporter.write_line(f"{key:>4} {'PASS' if ok else 'FAIL'}  {detail}")
