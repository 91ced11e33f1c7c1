import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import ks
from kbsa.depmodel import (
    DependencyModel,
    QuadraticBallOverride,
    SubsetSpec,
    conditional_cdf,
    conditional_cdf_w,
    conditional_quantile,
    dependency_transform,
    sample_route,
    sample_target,
)
from kbsa.exceptions import DegenerateConditioningError, DomainError, RejectionStarvationError, ZeroDenominatorError
from kbsa.marginals import BetaFirstKind, InputSpace, Normal, Uniform
from kbsa.weights import CallableWeight, Constant, EffectiveWeight, IndicatorThreshold, Polynomial
from kbsa.streams import Stream


def _energy_pvalue(x, y, n_perm=199, seed=0, block=1000):
    """Permutation p-value of the two-sample energy statistic (pooled distances computed in blocks)."""
    z = np.concatenate([x, y])
    N, n = len(z), len(x)
    rng = np.random.default_rng(seed)
    labels = np.zeros((N, n_perm + 1))
    labels[:n, 0] = 1.0
    for p in range(1, n_perm + 1):
        labels[rng.permutation(N)[:n], p] = 1.0
    other = 1.0 - labels
    sxx = np.zeros(n_perm + 1)
    syy = np.zeros(n_perm + 1)
    sxy = np.zeros(n_perm + 1)
    for s in range(0, N, block):
        D = np.sqrt(((z[s : s + block, None, :] - z[None, :, :]) ** 2).sum(-1))
        DL, DO = D @ labels, D @ other
        sxx += np.sum(labels[s : s + block] * DL, axis=0)
        syy += np.sum(other[s : s + block] * DO, axis=0)
        sxy += np.sum(labels[s : s + block] * DO, axis=0)
    m = N - n
    e = 2 * sxy / (n * m) - sxx / n**2 - syy / m**2
    return float(np.mean(e[1:] >= e[0]))


@pytest.fixture
def const_ew():
    return EffectiveWeight(Constant(), InputSpace([Normal(), Uniform(0.0, 2.0), Normal(1.0, 3.0)]))


def _ball_pair(ew, c=1.0):
    exact = DependencyModel(ew, SubsetSpec.of((), 3), override=QuadraticBallOverride(c))
    return exact


def _ball_ratios(x1, x_rest, c=1.0):
    rho = c - x1**2
    z2 = x_rest[:, 0] ** 2 / rho
    z3 = x_rest[:, 1] ** 2 / (rho * (1 - z2))
    return z2, z3


# subset spec


def test_subset_spec_defaults_and_validation():
    s = SubsetSpec.of((2, 0), 4)
    assert s.u == (0, 2) and s.pi == (1, 3) and s.d == 4
    assert SubsetSpec.of((1,), 3, (2, 0)).pi == (2, 0)
    with pytest.raises(ValueError):
        SubsetSpec.of((0,), 3, (0, 1))
    with pytest.raises(ValueError):
        SubsetSpec.of((3,), 3)


def test_model_parameter_validation(const_ew):
    with pytest.raises(ValueError):
        DependencyModel(const_ew, SubsetSpec.of((), 3), inner_mc=99)
    with pytest.raises(ValueError):
        DependencyModel(const_ew, SubsetSpec.of((), 3), inversion_tol=0.01)
    with pytest.raises(Exception):
        DependencyModel(const_ew, SubsetSpec.of((), 2))


# conditional CDF W


def test_w_constant_weight_product(const_ew):
    dm = DependencyModel(const_ew, SubsetSpec.of((0,), 3), inner_mc=20000)
    assert conditional_cdf_w(dm, [0.3], [0.3, 0.7], Stream(1)) == pytest.approx(0.21, abs=1e-12)


def test_w_zero_and_full_levels(ball_setup):
    _, ew = ball_setup
    dm = DependencyModel(ew, SubsetSpec.of((0,), 3), inner_mc=5000)
    assert conditional_cdf_w(dm, [0.2], [0.0, 0.6], Stream(1)) == 0.0
    assert conditional_cdf_w(dm, [0.2], [1.0, 1.0], Stream(1)) == 1.0
    v = conditional_cdf_w(dm, [0.2], [0.5, 0.5], Stream(1))
    assert 0.0 < v < 1.0


def test_w_monotone_under_common_numbers(ball_setup):
    _, ew = ball_setup
    dm = DependencyModel(ew, SubsetSpec.of((0,), 3), inner_mc=5000)
    vals = [conditional_cdf_w(dm, [0.1], [a, 1.0], Stream(4)) for a in np.linspace(0.05, 1.0, 20)]
    assert np.all(np.diff(vals) >= -0.01)
    assert vals[0] < 0.05 and vals[-1] == 1.0


def test_w_errors(ball_setup):
    _, ew = ball_setup
    dm = DependencyModel(ew, SubsetSpec.of((0,), 3))
    with pytest.raises(DomainError):
        conditional_cdf_w(dm, [0.1], [1.2, 0.5])
    with pytest.raises(DomainError):
        conditional_cdf_w(dm, [0.1], [0.5])
    with pytest.raises(ZeroDenominatorError):
        conditional_cdf_w(dm, [1.5], [0.5, 0.5])


# conditional quantile


@given(st.floats(0.01, 0.99))
@settings(max_examples=25, deadline=None)
def test_quantile_constant_weight_is_identity(p):
    ew = EffectiveWeight(Constant(), InputSpace([Normal()] * 3))
    dm = DependencyModel(ew, SubsetSpec.of((0,), 3), force_numerical=True)
    assert conditional_quantile(dm, 0, [0.4], [], p, Stream(2)) == pytest.approx(p, abs=1e-3)
    assert conditional_quantile(dm, 1, [0.4], [0.3], p, Stream(2)) == pytest.approx(p, abs=1e-3)


def test_quantile_symmetry(uniform_ball_setup):
    _, ew = uniform_ball_setup
    dm = DependencyModel(ew, SubsetSpec.of((), 3))
    assert conditional_quantile(dm, 0, [], [], 0.5, Stream(3)) == pytest.approx(0.5, abs=1e-3)
    dm1 = DependencyModel(ew, SubsetSpec.of((0,), 3))
    assert conditional_quantile(dm1, 1, [0.3], [0.6], 0.5, Stream(3)) == pytest.approx(0.5, abs=1e-3)


def test_quantile_inverts_the_empirical_cdf(ball_setup):
    _, ew = ball_setup
    dm = DependencyModel(ew, SubsetSpec.of((0,), 3))
    for p in (0.1, 0.37, 0.8):
        z = conditional_quantile(dm, 0, [0.4], [], p, Stream(8))
        assert abs(conditional_cdf(dm, 0, [0.4], [], z, Stream(8)) - p) <= dm.inversion_tol


def test_quantile_errors(ball_setup):
    _, ew = ball_setup
    dm = DependencyModel(ew, SubsetSpec.of((0,), 3))
    with pytest.raises(DomainError):
        conditional_quantile(dm, 0, [0.1], [], 1.0)
    with pytest.raises(Exception):
        conditional_quantile(dm, 1, [0.1], [], 0.5)
    with pytest.raises((DegenerateConditioningError, ZeroDenominatorError)):
        conditional_quantile(dm, 0, [1.5], [], 0.5, Stream(1))


def test_numerical_conditional_ratios_follow_beta_laws(uniform_ball_setup):
    """Uniform law on the unit ball: Z2 ~ Beta(1/2, 3/2), Z3 ~ Beta(1/2, 1) given X1."""
    _, ew = uniform_ball_setup
    n = 10_000
    x1 = sample_target(_ball_pair(ew), n, Stream(3))[:, :1]
    dm = DependencyModel(ew, SubsetSpec.of((0,), 3))
    assert dm.route == "numerical"
    U = np.random.default_rng(1).uniform(size=(n, 2))
    x = dm.transform(x1, U, Stream(5))
    z2, z3 = _ball_ratios(x1[:, 0], x)
    assert ks(z2, stats.beta(0.5, 1.5).cdf) < 0.02
    assert ks(z3, stats.beta(0.5, 1.0).cdf) < 0.03


# transform


def test_independence_reduction_is_exact(const_ew):
    dm = DependencyModel(const_ew, SubsetSpec.of((1,), 3), force_numerical=True)
    U = np.random.default_rng(0).uniform(size=(50, 2))
    a = dm.transform(np.full((50, 1), 0.3), U, Stream(1))
    b = dm.transform(np.full((50, 1), 1.7), U, Stream(9))
    expected = const_ew.space.quantile(U, (0, 2))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, expected, rtol=1e-12)
    np.testing.assert_allclose(dependency_transform(dm, np.zeros((50, 1)), U), expected, rtol=1e-12)


def test_transform_validates_uniforms(const_ew):
    dm = DependencyModel(const_ew, SubsetSpec.of((0,), 3))
    with pytest.raises(DomainError):
        dm.transform(np.zeros((1, 1)), np.array([[0.0, 0.5]]))
    with pytest.raises(Exception):
        dm.transform(np.zeros((1, 1)), np.array([[0.5]]))


def test_override_formula():
    c = 2.0
    ov = QuadraticBallOverride(c)
    rng = np.random.default_rng(3)
    x1 = rng.uniform(-1.2, 1.2, size=(200, 1))
    U = rng.uniform(size=(200, 2))
    x = ov.transform(SubsetSpec.of((0,), 3), x1, U)
    rho = c - x1[:, 0] ** 2
    z2 = x[:, 0] ** 2 / rho
    z3 = x[:, 1] ** 2 / (rho * (1 - z2))
    # squares reproduce the parametrisation and stay on or inside the ball
    np.testing.assert_allclose(x[:, 0] ** 2, z2 * rho)
    np.testing.assert_allclose(x[:, 1] ** 2, z3 * rho * (1 - z2))
    assert np.all((x1**2).sum(1) + (x**2).sum(1) <= c + 1e-12)
    # the last coordinate is uniform on its chord: its sign and size follow the uniform
    np.testing.assert_allclose(x[:, 1], np.sqrt(rho * (1 - z2)) * (2 * U[:, 1] - 1))
    with pytest.raises(DegenerateConditioningError):
        ov.transform(SubsetSpec.of((0,), 3), np.array([[2.0]]), U[:1])


def test_override_laws():
    n = 20_000
    ov = QuadraticBallOverride(1.0)
    U = np.random.default_rng(4).uniform(size=(n, 3))
    x = ov.transform(SubsetSpec.of((), 3), np.empty((n, 0)), U)
    assert ks(x[:, 0] ** 2, BetaFirstKind(1.0, 0.5, 2.0).cdf) < 0.015
    z2, z3 = _ball_ratios(x[:, 0], x[:, 1:])
    assert ks(z2, stats.beta(0.5, 1.5).cdf) < 0.015
    assert ks(z3, stats.beta(0.5, 1.0).cdf) < 0.015


def test_numerical_matches_override(uniform_ball_setup):
    _, ew = uniform_ball_setup
    n = 10_000
    U = np.random.default_rng(6).uniform(size=(n, 3))
    num = DependencyModel(ew, SubsetSpec.of((), 3)).transform(np.empty((n, 0)), U, Stream(7))
    exact = sample_target(_ball_pair(ew), n, Stream(8))
    for j in range(3):
        assert stats.ks_2samp(num[:, j], exact[:, j]).statistic < 0.03


def test_grid_shape(uniform_ball_setup):
    _, ew = uniform_ball_setup
    dm = DependencyModel(ew, SubsetSpec.of((0,), 3))
    U = np.random.default_rng(0).uniform(size=(4, 5, 2))
    out = dm.transform(np.full((4, 1), 0.2), U, Stream(1))
    assert out.shape == (4, 5, 2)
    assert np.all(0.04 + (out**2).sum(-1) <= 1.0 + 1e-9)
    full = dm.assemble(np.full((4, 1), 0.2), out)
    assert full.shape == (4, 5, 3) and np.all(full[..., 0] == 0.2)


# sampling


def test_sample_constant_weight_is_initial_law():
    ew = EffectiveWeight(Constant(), InputSpace([Normal(), Uniform(0.0, 1.0)]))
    x = sample_target(DependencyModel(ew, SubsetSpec.of((), 2)), 10_000, Stream(1))
    assert ks(x[:, 0], stats.norm.cdf) < 0.02
    assert ks(x[:, 1], stats.uniform.cdf) < 0.02


def test_sample_ball_mean(uniform_ball_setup):
    model, ew = uniform_ball_setup
    dm = DependencyModel(ew, SubsetSpec.of((), 3))
    assert sample_route(dm) == "rejection"
    y = model.evaluate_grid(sample_target(dm, 20_000, Stream(2)))
    se = y.std() / np.sqrt(len(y))
    assert abs(y.mean() - 0.6) <= 3 * se


def test_sample_override_mean(ball_setup):
    model, ew = ball_setup
    dm = DependencyModel(ew, SubsetSpec.of((), 3), override=QuadraticBallOverride(1.0))
    y = model.evaluate_grid(sample_target(dm, 20_000, Stream(2)))
    assert abs(y.mean() - 0.6) <= 3 * y.std() / np.sqrt(len(y))


def test_sample_polynomial_marginals():
    alpha = [0.0, 1.0, 3.0, 10.0]
    ew = EffectiveWeight(Polynomial(alpha), InputSpace([Uniform(0.0, 1.0)] * 4))
    dm = DependencyModel(ew, SubsetSpec.of((), 4))
    assert dm.route == "factorized"
    x = sample_target(dm, 10_000, Stream(3))
    for j, a in enumerate(alpha):
        assert ks(x[:, j], stats.beta(a + 1, 1).cdf) < 0.02


def test_transform_and_rejection_agree(uniform_ball_setup):
    _, ew = uniform_ball_setup
    dm = DependencyModel(ew, SubsetSpec.of((), 3))
    a = sample_target(dm, 5000, Stream(11), route="numerical")
    b = sample_target(dm, 5000, Stream(12), route="rejection")
    assert _energy_pvalue(a, b, n_perm=99) > 0.01


def test_permutation_consistency(uniform_ball_setup):
    _, ew = uniform_ball_setup
    a = sample_target(DependencyModel(ew, SubsetSpec.of((), 3, (0, 1, 2))), 10_000, Stream(1), route="numerical")
    b = sample_target(DependencyModel(ew, SubsetSpec.of((), 3, (2, 0, 1))), 10_000, Stream(2), route="numerical")
    for j in range(3):
        assert stats.ks_2samp(a[:, j], b[:, j]).statistic < 0.03


def test_rejection_starvation():
    space = InputSpace([Normal()] * 2)
    rare = CallableWeight(lambda x: (x[:, 0] > 4.5).astype(float), binary=True)
    ew = EffectiveWeight(rare, space, pilot_n=0)
    with pytest.raises(RejectionStarvationError):
        sample_target(DependencyModel(ew, SubsetSpec.of((), 2)), 10, Stream(1))


def test_sample_rejects_bad_n(const_ew):
    with pytest.raises(ValueError):
        sample_target(DependencyModel(const_ew, SubsetSpec.of((), 3)), 0)


def test_sampling_is_seeded(uniform_ball_setup):
    _, ew = uniform_ball_setup
    dm = DependencyModel(ew, SubsetSpec.of((), 3))
    np.testing.assert_array_equal(sample_target(dm, 100, Stream(5)), sample_target(dm, 100, Stream(5)))


def test_transform_and_rejection_agree_gaussian_inputs(ball_setup):
    """Truncated Gaussian inputs: the sampler follows the weighted law, which is not the uniform ball."""
    model, ew = ball_setup
    dm = DependencyModel(ew, SubsetSpec.of((), 3))
    a = sample_target(dm, 3000, Stream(21), route="numerical")
    b = sample_target(dm, 3000, Stream(22), route="rejection")
    assert _energy_pvalue(a, b, n_perm=99) > 0.01
    # E[M | M <= 1] for a chi-square(3) output, well away from the ball value 0.6
    t = stats.chi2(3)
    exact = t.expect(lambda v: v, lb=0, ub=1) / t.cdf(1)
    y = model.evaluate_grid(b)
    assert abs(y.mean() - exact) <= 3 * y.std() / np.sqrt(len(y))
    assert abs(exact - 0.6) > 0.02


def test_edge_cell_draw_is_redrawn(uniform_ball_setup):
    """A first draw in the last grid cell can leave the support; it is redrawn instead of failing."""
    _, ew = uniform_ball_setup
    dm = DependencyModel(ew, SubsetSpec.of((1,), 3))
    n = 200
    U = np.column_stack([np.full(n, 1 - 1e-9), np.full(n, 0.5)])
    x = dm.transform(np.full((n, 1), 0.0105), U, Stream(4))
    assert np.all(x[:, 0] ** 2 + 0.0105**2 + x[:, 1] ** 2 <= 1.0)
