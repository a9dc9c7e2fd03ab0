import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedmbo.problems import QuadraticFamily, generate_quadratic_family

settings.register_profile("fedmbo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fedmbo")


@pytest.fixture
def scalar_family():
    """A=2, B=1, c=0, V=1, u=0: y*(x) = -x/2 and Phi(x) = x^2 / 8."""
    return QuadraticFamily.scalar()


@pytest.fixture
def small_family():
    return generate_quadratic_family(5, 3, 4, 6, 1.0, 3.0, 1.0, seed=0)


@pytest.fixture
def zero_variance_family():
    """One client, one sample: every oracle is deterministic."""
    return generate_quadratic_family(1, 2, 3, 1, 1.0, 2.0, 0.0, seed=1, noise=0.0)


def fd_gradient(fn, x, h=1e-5):
    g = np.zeros_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line for a criterion, then fail the test if it did not pass."""

    def report(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
