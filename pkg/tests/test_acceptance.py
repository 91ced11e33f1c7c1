"""Acceptance criteria 1 to 10.

Each test records one PASS/FAIL line, printed together at the end of the
session.  Expensive runs are shared between criteria through module fixtures.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from conftest import ks, record_criterion
from kbsa import cli
from kbsa import config as cfgmod
from kbsa import validation
from kbsa.depmodel import DependencyModel, SubsetSpec, sample_target
from kbsa.estimators import analyze
from kbsa.kernels import KernelSpec
from kbsa.marginals import BetaFirstKind, InputSpace, Normal, Uniform
from kbsa.models import Quadratic
from kbsa.streams import Stream
from kbsa.weights import EffectiveWeight, IndicatorThreshold

pytestmark = pytest.mark.slow


def _timed(fn, *args, **kwargs):
    t = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t


def _failed(checks):
    return [c for c in checks if not c.passed]


def _worst(checks):
    return max((abs(c.observed - c.expected) for c in checks if c.tolerance > 0), default=0.0)


@pytest.fixture(scope="module")
def quad_override():
    return _timed(validation.run_quadratic51)


@pytest.fixture(scope="module")
def quad_numerical():
    return _timed(validation.run_quadratic51_numerical)


@pytest.fixture(scope="module")
def quad_c5():
    raw = cfgmod.bundled("quadratic51")
    raw["weight"]["upper"] = 5.0
    raw["dependency"]["c"] = 5.0
    run = cfgmod.build(raw)
    res = analyze(run.model, run.ew, run.subsets, run.kernels, run.kinds, run.estimator, run.override)
    return res, validation.ordering_checks("quadratic51-c5", res)


@pytest.fixture(scope="module")
def table1():
    return _timed(validation.run_table, "gsobol_alpha0")


@pytest.fixture(scope="module")
def table2():
    return _timed(validation.run_table, "gsobol_alpha20")


@pytest.fixture(scope="module")
def identities():
    return validation.run_identities33()


def test_criterion_01_quadratic_case(quad_override, quad_numerical):
    (checks, _), secs = quad_override
    (nchecks, _), nsecs = quad_numerical
    values = [c for c in checks if c.tolerance > 0]
    nvalues = [c for c in nchecks if c.tolerance > 0]
    assert len(values) == len(nvalues) == 18
    ok = not _failed(values) and secs <= 120 and not _failed(nvalues) and nsecs <= 900
    record_criterion(1, ok, f"override: max |err| {_worst(values):.4f} (tol 0.02) in {secs:.0f}s; "
                            f"numerical m=1000: max |err| {_worst(nvalues):.4f} (tol 0.04) in {nsecs:.0f}s")
    assert ok, [c.name for c in _failed(values) + _failed(nvalues)]


def test_criterion_02_threshold_invariance(quad_override, quad_c5):
    (_, base), _ = quad_override
    res, _ = quad_c5
    worst = 0.0
    for e in base.estimates:
        f = res.get(e.kind, e.u, e.kernel)
        worst = max(worst, abs(f.sqrt_value - e.sqrt_value) / (3 * math.hypot(f.sqrt_std_error, e.sqrt_std_error)))
    ok = worst <= 1.0
    record_criterion(2, ok, f"c=5 vs c=1: largest |diff| / (3 combined SE) = {worst:.3g}")
    assert ok


def _table_cells(checks):
    return [c for c in checks if c.tolerance > 0]


def test_criterion_03_table1(table1):
    (checks, _), secs = table1
    cells = _table_cells(checks)
    assert len(cells) == 60
    ok = not _failed(cells) and secs <= 600
    record_criterion(3, ok, f"alpha=0: {len(cells) - len(_failed(cells))}/60 cells, max |err| {_worst(cells):.4f}, {secs:.0f}s")
    assert ok, [c.name for c in _failed(cells)]


def test_criterion_04_table2_and_set_decisions(table2):
    (checks, res), _ = table2
    cells = _table_cells(checks)
    assert len(cells) == 60
    names = [f"X{j + 1}" for j in range(10)]
    l1_important = {n for j, n in enumerate(names) if res.get("upsilon", (j,), "l1").sqrt_value >= 0.1}
    l1_total = {n for j, n in enumerate(names) if res.get("total", (j,), "l1").sqrt_value >= 0.1}
    q_unimportant = {n for j, n in enumerate(names) if res.get("total", (j,), "quadratic").sqrt_value < 0.1}
    q_bound = {n for j, n in enumerate(names) if res.get("upsilon", (j,), "quadratic").sqrt_value < 0.1}
    sets_ok = l1_important == set(names) and l1_total == set(names) and q_unimportant == {f"X{j}" for j in range(3, 8)}
    ok = not _failed(cells) and sets_ok
    record_criterion(4, ok, f"alpha=(20,...,1): {len(cells) - len(_failed(cells))}/60 cells, max |err| {_worst(cells):.4f}; "
                            f"l1 important {len(l1_important)}/10; quadratic total < 0.1: {sorted(q_unimportant, key=lambda s: int(s[1:]))}"
                            f" (Upsilon bound < 0.1 alone: {sorted(q_bound, key=lambda s: int(s[1:]))})")
    assert ok, [c.name for c in _failed(cells)]


def test_criterion_05_sobol_equivalence(identities):
    checks, _ = identities
    sobol = [c for c in checks if "vs Sobol" in c.name]
    assert len(sobol) == 8
    ok = not _failed(sobol)
    record_criterion(5, ok, f"g-function: max |sqrt S^k2 - Sobol| {_worst(sobol):.4f} (tol 0.03)")
    assert ok, [c.name for c in _failed(sobol)]


def test_criterion_06_ordering(quad_override, quad_numerical, quad_c5, table1, table2, identities):
    checks = (quad_override[0][0] + quad_numerical[0][0] + quad_c5[1] + table1[0][0] + table2[0][0] + identities[0])
    order = [c for c in checks if c.name.startswith("ordering")]
    bad = _failed(order)
    ok = not bad and len(order) > 0
    record_criterion(6, ok, f"{len(order)} ordering checks across criteria 1-5, {len(bad)} violations")
    assert ok, [c.name for c in bad]


def test_criterion_07_factor_of_two(identities):
    checks, _ = identities
    pairs = [c for c in checks if "2 sqrt total" in c.name]
    assert len(pairs) == 8
    ok = not _failed(pairs)
    worst = max(abs(c.observed - c.expected) / c.tolerance for c in pairs)
    record_criterion(7, ok, f"g-function: largest |sqrt Upsilon - 2 sqrt S_T| / (3 SE) = {worst:.3g}")
    assert ok


def _numerical_sample(space, n=10_000):
    model = Quadratic()
    ew = EffectiveWeight(IndicatorThreshold(model, upper=1.0), space)
    dm = DependencyModel(ew, SubsetSpec.of((), 3))
    assert dm.route == "numerical"
    return sample_target(dm, n, Stream(8), route="numerical")


def _beta_distances(x, c=1.0):
    rho = c - x[:, 0] ** 2
    z2 = x[:, 1] ** 2 / rho
    z3 = x[:, 2] ** 2 / (rho * (1 - z2))
    return (ks(x[:, 0] ** 2, BetaFirstKind(c, 0.5, 2.0).cdf), ks(z2, stats.beta(0.5, 1.5).cdf),
            ks(z3, stats.beta(0.5, 1.0).cdf))


def test_criterion_08_dependency_model():
    # the Beta factorization holds for the uniform law on the ball, realized by U(-1, 1) inputs
    ball = _beta_distances(_numerical_sample(InputSpace([Uniform(-1.0, 1.0)] * 3)))
    # the same statistics with standard normal inputs truncated to the ball
    gauss = _beta_distances(_numerical_sample(InputSpace([Normal()] * 3)))
    ok = max(ball) < 0.03
    record_criterion(8, ok, "uniform-ball inputs, n=1e4: KS X1^2 {:.4f}, Z2 {:.4f}, Z3 {:.4f} (< 0.03); "
                            "N(0,1) inputs truncated to the ball give {:.4f}, {:.4f}, {:.4f} (different law)".format(*ball, *gauss))
    assert ok
    # the Gaussian reading does not follow these laws: Z2 is visibly off at this n
    assert gauss[1] > 0.03


def test_criterion_09_ci_calibration():
    raw = cfgmod.bundled("quadratic51")
    run = cfgmod.build(raw)
    exact = 4.0 / 27.0
    l1 = KernelSpec("l1")
    start = time.perf_counter()
    hits = 0
    for rep in range(100):
        cfg = run.estimator.replace(base_seed=1000 + rep)
        e = analyze(run.model, run.ew, [(0,)], [l1], ["first_order"], cfg, run.override).get("first_order", (0,), "l1")
        lo, hi = e.ci
        hits += lo <= exact <= hi
    secs = time.perf_counter() - start
    ok = hits >= 90 and secs <= 1200
    record_criterion(9, ok, f"95% CI covered S^k1_1 = 4/27 in {hits}/100 repetitions, {secs:.0f}s")
    assert ok


def test_criterion_10_determinism(tmp_path, capsys):
    reports = []
    for t in ("1", "4", "8"):
        out = tmp_path / f"t{t}"
        assert cli.main(["analyze", "--config", "quadratic51", "--threads", t, "--out", str(out)]) == 0
        reports.append([(out / f).read_bytes() for f in ("indices_wide.csv", "indices_long.csv", "report.json")])
    capsys.readouterr()
    ok = reports[0] == reports[1] == reports[2]
    assert json.loads(reports[0][2])["config_hash"]
    record_criterion(10, ok, "quadratic51 analyze at threads 1, 4, 8: byte-identical wide, long and JSON reports")
    assert ok
