import numpy as np
import pytest

from grape_moe.synth import generate_model

ACCEPTANCE_RESULTS = []


def record_criterion(name, passed, detail=""):
    ACCEPTANCE_RESULTS.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_model():
    return generate_model(3, [4, 5, 4], 6, 10, 2, [0.1, 0.5, 0.9], seed=7)


def const_block(c, n=2):
    v = np.full((n, n), float(c))
    np.fill_diagonal(v, 0.0)
    return v


def random_block(rng, n):
    v = rng.uniform(0.0, 1.0, size=(n, n))
    v = np.triu(v, 1)
    return v + v.T
