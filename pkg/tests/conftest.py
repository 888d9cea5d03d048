import numpy as np
import pytest


def random_pd(rng, n, eps=0.5, dtype=np.float64):
    a = rng.standard_normal((n, n))
    return (a @ a.T / n + eps * np.eye(n)).astype(dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
