import numpy as np
import pytest
from hypothesis import settings

# derandomized so repeated runs are identical; numpy ops can be slow on first call
settings.register_profile("repo", deadline=None, derandomize=True, max_examples=40)
settings.load_profile("repo")


@pytest.fixture
def rng():
    from dcdc.tensor import Rng
    return Rng(1234)


def assert_rel(a, b, tol):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-300)
    assert np.abs(a - b).max(initial=0.0) / scale <= tol


# -- acceptance report ------------------------------------------------------

ACCEPTANCE = []


@pytest.fixture
def criterion():
    """``criterion(label, passed, detail)`` records one PASS/FAIL line and returns ``passed``."""
    def record(label, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {label}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
