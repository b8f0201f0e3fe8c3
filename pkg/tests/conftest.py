"""Shared trained-model cache so that slow runs happen once per session."""

import pytest

from sparsedepth.harness.train import train

_RUNS = {}


def trained(cfg):
    """TrainResult for ``cfg``, trained on first request."""
    if cfg not in _RUNS:
        _RUNS[cfg] = train(cfg)
    return _RUNS[cfg]


@pytest.fixture(scope="session")
def train_cached():
    return trained


# one line per acceptance criterion, printed in the terminal summary
VERDICTS = []


def record(number: int, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    VERDICTS.append((number, line))
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(VERDICTS):
            terminalreporter.write_line(line)
