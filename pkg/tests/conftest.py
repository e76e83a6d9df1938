import numpy as np
import pytest

from anchormix.core import PriorSpec

ACCEPTANCE_LINES: dict[str, str] = {}


def record_acceptance(name: str, passed: bool, detail: str) -> str:
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES[name] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES.values():
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def galaxies_prior():
    return PriorSpec.normal_gamma(21.7255, 1.0 / 52.0**2, 2.0, rate_hyper=(0.2, 0.016), dirichlet=1.0)
