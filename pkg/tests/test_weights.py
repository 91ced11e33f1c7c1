import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from kbsa.exceptions import DegenerateWeightError, ModelEvaluationError
from kbsa.marginals import InputSpace, Normal, Uniform, draw
from kbsa.models import FunctionModel, Quadratic, ThetaToy
from kbsa.streams import Stream
from kbsa.weights import (
    Composite,
    Constant,
    EffectiveWeight,
    FunctionalLoss,
    IndicatorThreshold,
    Polynomial,
    PowerFactor,
    SmoothMembership,
    effective_weight_eval,
    normalizing_constant,
    weight_eval,
    weight_from_dict,
)


def test_weight_eval_examples():
    w = IndicatorThreshold(Quadratic(), upper=1.0)
    assert weight_eval(w, np.zeros(3)) == 1.0
    assert weight_eval(w, np.ones(3)) == 0.0
    assert weight_eval(Polynomial([0.0] * 4), np.array([0.3, 0.9, 0.1, 0.5])) == 1.0
    assert weight_eval(Polynomial([2.0]), np.array([0.5])) == 0.25


def test_indicator_values_binary():
    w = IndicatorThreshold(Quadratic(), lower=0.5, upper=2.0)
    vals = w(draw(InputSpace([Normal()] * 3), 1000, Stream(0)))
    assert set(np.unique(vals)) <= {0.0, 1.0}
    assert w.binary


def test_indicator_on_inputs():
    w = IndicatorThreshold(None, lower=[0.0, 0.0], upper=[0.5, 1.0])
    assert w(np.array([[0.2, 0.9], [0.6, 0.1]])).tolist() == [1.0, 0.0]


def test_smooth_membership_and_composite():
    m = SmoothMembership(Quadratic(), slope=2.0, offset=1.0)
    x = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    assert m(x)[0] == pytest.approx(0.5)
    assert m(x)[1] == pytest.approx(1 / (1 + math.exp(2.0)))
    c = Composite(m, IndicatorThreshold(Quadratic(), upper=0.5))
    assert c(x).tolist() == [0.0, pytest.approx(1 / (1 + math.exp(2.0)))]
    assert c.factors() is None


def test_composite_power_factors_add():
    c = Composite(Polynomial([1.0, 2.0]), Polynomial([3.0, 0.0]))
    f = c.factors()
    assert all(isinstance(g, PowerFactor) for g in f)
    assert [g.alpha for g in f] == [4.0, 2.0]


def test_functional_loss():
    model = ThetaToy()
    w = FunctionalLoss(model, "norm2sq", "max")
    x = np.array([[0.5, 0.2]])
    expect = max((t * 0.5 + 0.2) ** 2 for t in model.theta_grid.values)
    assert w(x)[0] == pytest.approx(expect)
    boxed = FunctionalLoss(model, "norm1", "mean", upper=0.6)
    assert boxed(x)[0] == 0.0


def test_model_errors_propagate_with_point():
    bad = FunctionModel(lambda x: np.where(x[:, :1] > 0.5, np.nan, 1.0), d=1)
    w = IndicatorThreshold(bad, upper=2.0)
    with pytest.raises(ModelEvaluationError, match="x="):
        w(np.array([[0.9]]))


def test_effective_weight_independence_exact():
    sp = InputSpace([Normal()] * 3)
    w = IndicatorThreshold(Quadratic(), upper=2.0)
    ew = EffectiveWeight(w, sp)
    x = draw(sp, 100, Stream(1))
    assert np.array_equal(effective_weight_eval(ew, x), w(x))


def test_effective_weight_half_cube_copula():
    def copula(u):
        return np.where(u[..., 0] < 0.5, 2.0, 0.0)

    sp = InputSpace([Uniform()] * 2, copula)
    ew = EffectiveWeight(Constant(), sp)
    assert ew(np.array([[0.2, 0.9]]))[0] == 2.0
    assert ew(np.array([[0.7, 0.9]]))[0] == 0.0
    ew2 = EffectiveWeight(IndicatorThreshold(None, upper=[0.1, 1.0]), sp)
    assert ew2(np.array([[0.3, 0.5]]))[0] == 0.0


def test_normalizing_constant_examples():
    assert normalizing_constant(EffectiveWeight(Constant(), InputSpace([Normal()] * 2)), 100, Stream(0)) == (1.0, 0.0)
    ew = EffectiveWeight(IndicatorThreshold(Quadratic(), upper=1.0), InputSpace([Normal()] * 3))
    mean, se = normalizing_constant(ew, 200000, Stream(1))
    assert abs(mean - stats.chi2(3).cdf(1.0)) < 3 * se
    ew = EffectiveWeight(Polynomial([1.0, 1.0]), InputSpace([Uniform()] * 2))
    mean, se = normalizing_constant(ew, 100000, Stream(2))
    assert abs(mean - 0.25) < 3 * se


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 100.0))
def test_normalizing_constant_scale_equivariant(lam):
    sp = InputSpace([Uniform()] * 2)
    base = Polynomial([1.0, 2.0])
    m1, _ = normalizing_constant(EffectiveWeight(base, sp), 500, Stream(3))
    m2, _ = normalizing_constant(EffectiveWeight(base.scaled(lam), sp), 500, Stream(3))
    assert m2 == pytest.approx(lam * m1, rel=1e-12)


def test_degenerate_weights():
    with pytest.raises(DegenerateWeightError):
        EffectiveWeight(IndicatorThreshold(Quadratic(), upper=-1.0), InputSpace([Normal()] * 3))
    ew = EffectiveWeight(IndicatorThreshold(Quadratic(), upper=0.05), InputSpace([Normal()] * 3), pilot_n=0)
    with pytest.raises(DegenerateWeightError):
        normalizing_constant(ew, 10, Stream(0))


def test_weight_from_dict():
    q = Quadratic()
    assert isinstance(weight_from_dict({"kind": "indicator_threshold", "upper": 1.0}, q), IndicatorThreshold)
    p = weight_from_dict({"kind": "polynomial", "alpha": 3}, d=4)
    assert p.alpha.tolist() == [3.0] * 4
    with pytest.raises(ValueError):
        weight_from_dict({"kind": "w4"})
