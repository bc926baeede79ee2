import numpy as np
import pytest

from skir_graphon.experiments import load_scenario
from skir_graphon.model import BlockGraphon, GroupParams, Policy

AGE_WEIGHTS = [[1.0, 0.9, 0.8, 0.7], [0.9, 0.9, 0.8, 0.8], [0.8, 0.8, 0.9, 0.8], [0.7, 0.8, 0.8, 0.8]]
AGE_RATES = [(0.4, 0.5, 0.75, 0.1, 0.1), (0.3, 0.42, 0.62, 0.05, 0.05),
            (0.3, 0.32, 0.48, 0.05, 0.05), (0.3, 0.2, 0.3, 0.15, 0.15)]
P0 = (0.95, 0.02, 0.03, 0.0)

_ACCEPTANCE = []


def age_params(p0=P0, gamma=0.0, c=0.0):
    return [GroupParams(*row, p0=p0, gamma=gamma, c=c) for row in AGE_RATES]


def age_graphon():
    return BlockGraphon(AGE_WEIGHTS, [0.25] * 4)


POLICY0 = Policy.constant(0.25, 1.0)


@pytest.fixture(scope="session")
def exp1():
    """Solved age-group scenario under the light policy."""
    sc = load_scenario("experiment1-policy0")
    return sc, sc.solve()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance():
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
