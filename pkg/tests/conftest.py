import numpy as np
import pytest

from deskdiff import backend

_ACCEPTANCE = []


@pytest.fixture
def f64():
    """Run the test body in 64-bit mode."""
    with backend.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one (criterion, passed, detail) row per acceptance check."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"ACCEPTANCE criterion {crit}: {'PASS' if ok else 'FAIL'}  {detail}")
