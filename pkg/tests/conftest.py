import numpy as np
import pytest
from scipy import stats

from kbsa.marginals import InputSpace, Normal, Uniform
from kbsa.models import Quadratic
from kbsa.weights import EffectiveWeight, IndicatorThreshold


def ks(sample, cdf) -> float:
    return float(stats.kstest(np.asarray(sample), cdf).statistic)


@pytest.fixture
def ball_setup():
    """Quadratic model, standard normal inputs, weight 1{M(x) <= 1}."""
    model = Quadratic()
    space = InputSpace([Normal()] * 3)
    return model, EffectiveWeight(IndicatorThreshold(model, upper=1.0), space)


@pytest.fixture
def uniform_ball_setup():
    """Quadratic model, U(-1, 1)^3 inputs, weight 1{M(x) <= 1}: the uniform law on the unit ball."""
    model = Quadratic()
    space = InputSpace([Uniform(-1.0, 1.0)] * 3)
    return model, EffectiveWeight(IndicatorThreshold(model, upper=1.0), space)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
