import numpy as np
import pytest

from regmfg.exact import model_constants, solve_mfe
from regmfg.model import benchmark_model, benchmark_regularizer


@pytest.fixture(scope="session")
def model():
    return benchmark_model()


@pytest.fixture(scope="session")
def reg():
    return benchmark_regularizer()


@pytest.fixture(scope="session")
def constants(model, reg):
    return model_constants(model, reg, lipschitz=model.lipschitz)


@pytest.fixture(scope="session")
def solution(model, reg, constants):
    return solve_mfe(model, reg, tol=1e-12, constants=constants)


def random_simplex(rng, n, size=None):
    """Uniform draws from the probability simplex (flat Dirichlet)."""
    return rng.dirichlet(np.ones(n), size=size)


def pytest_terminal_summary(terminalreporter):
    """One verdict line per acceptance criterion, whatever the outcome."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
