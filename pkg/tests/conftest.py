import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

_ACCEPTANCE: list = []


@pytest.fixture
def record():
    """record(criterion, passed, detail): one summary line per acceptance criterion."""
    def _record(criterion: int, passed: bool, detail: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion:2d}: {detail}"
        _ACCEPTANCE.append((criterion, line))
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy():
    """(model, params, data, baseline accuracy) for the trained toy CNN."""
    from opsearch.adapt import trained_toy
    from opsearch.engine.data import synthetic
    from opsearch.engine.train import accuracy

    data = synthetic(1)
    m, p = trained_toy(data, seed=0)
    return m, p, data, float(accuracy(m, p, data.val))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
