import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from classprop.mpe import (
    BINORMAL,
    POWER,
    DiscreteDistribution,
    MpeConfig,
    binomial_deviance,
    check_condition_B,
    estimate_nu,
    eval_model,
    fit_roc_model,
    nu_from_scores,
    nu_star_discrete,
    right_slope,
)

GRID27 = list(itertools.product((0.1, 0.5, 0.9), (0.1, 1.0, 5.0), (0.5, 1.0, 2.0)))
# the one-sided difference at h carries a (1-g)(1+mu)D(D-1)h/2 truncation term,
# so the 1e-3 bound at h=1e-4 is checked on a grid with D <= 2
SLOPE_GRID27 = list(itertools.product((0.1, 0.5, 0.9), (0.1, 1.0, 2.0), (0.5, 1.0, 2.0)))


def power_by_hand(g, d, mu, a):
    return (1 - g) * (1 + d * (a ** (-mu) - 1)) ** (-1 / mu) + g * a


# --- model evaluation ---------------------------------------------------------


def test_eval_model_examples():
    assert eval_model(BINORMAL, (0.4, 0.0), 0.3) == pytest.approx(0.3, abs=1e-15)
    assert eval_model(POWER, (1.0, 3.0, 0.7), 0.7) == pytest.approx(0.7, abs=1e-15)
    for kind, params in ((BINORMAL, (0.2, 1.5)), (POWER, (0.2, 1.5, 2.0))):
        assert eval_model(kind, params, 1.0) == pytest.approx(1.0, abs=1e-15)
        assert eval_model(kind, params, 0.0) == 0.0


def test_eval_model_matches_formulas():
    a = np.linspace(0.01, 0.99, 25)
    g, d = 0.3, 1.2
    expect = (1 - g) * norm.cdf(norm.ppf(a) + d) + g * a
    np.testing.assert_allclose(eval_model(BINORMAL, (g, d), a), expect, rtol=1e-12)
    for g, d, mu in GRID27:
        np.testing.assert_allclose(eval_model(POWER, (g, d, mu), a), power_by_hand(g, d, mu, a), rtol=1e-10)


def test_eval_model_invalid():
    with pytest.raises(ValueError):
        eval_model(BINORMAL, (1.2, 0.1), 0.5)
    with pytest.raises(ValueError):
        eval_model(POWER, (0.2, 0.1, 0.0), 0.5)
    with pytest.raises(ValueError):
        eval_model(POWER, (0.2, 0.1), 0.5)
    with pytest.raises(ValueError):
        eval_model("logit", (0.2, 0.1), 0.5)


def test_right_slope_examples():
    assert right_slope(BINORMAL, (0.3, 2.0)) == 0.3
    assert right_slope(POWER, (0.2, 0.5, 1.0)) == pytest.approx(0.6)
    assert right_slope(POWER, (0.0, 1.0, 3.0)) == 1.0


@pytest.mark.parametrize("g,d,mu", SLOPE_GRID27)
def test_power_slope_matches_finite_difference(g, d, mu):
    h = 1e-4
    fd = (eval_model(POWER, (g, d, mu), 1.0) - eval_model(POWER, (g, d, mu), 1.0 - h)) / h
    assert abs(fd - right_slope(POWER, (g, d, mu))) <= 1e-3


@pytest.mark.parametrize("g,d,mu", GRID27)
def test_power_difference_error_is_second_order_term(g, d, mu):
    h = 1e-4
    fd = (eval_model(POWER, (g, d, mu), 1.0) - eval_model(POWER, (g, d, mu), 1.0 - h)) / h
    predicted = -(1 - g) * (1 + mu) * d * (d - 1) * h / 2
    assert fd - right_slope(POWER, (g, d, mu)) == pytest.approx(predicted, abs=5e-6)


@pytest.mark.parametrize("g", (0.1, 0.5, 0.9))
@pytest.mark.parametrize("d", (1.0, 2.0, 5.0))
def test_binormal_difference_quotient_approaches_gamma(g, d):
    gaps = []
    for h in (1e-2, 1e-4, 1e-6):
        fd = (1.0 - eval_model(BINORMAL, (g, d), 1.0 - h)) / h
        gaps.append(abs(fd - g))
    # steep curves are linear to round-off near 1; allow that much slack
    assert gaps[1] <= gaps[0] + 1e-9 and gaps[2] <= gaps[1] + 1e-9
    assert gaps[2] <= 0.05


# --- deviance ------------------------------------------------------------------


def test_deviance_single_point_example():
    pts = np.array([[0.0, 0.0], [0.5, 0.8], [1.0, 1.0]])
    expect = -2 * (0.8 * np.log(0.5) + 0.2 * np.log(0.5))
    assert binomial_deviance(POWER, (0.0, 1.0, 1.0), pts) == pytest.approx(expect, rel=1e-12)
    assert binomial_deviance(BINORMAL, (0.5, 0.0), pts) == pytest.approx(1.3863, abs=1e-4)


def test_deviance_zero_on_exact_01_points():
    # with delta = 0 the power curve is 1 on (0, 1]; a point at p = 1 costs only the clamp
    pts = np.array([[0.5, 1.0]])
    assert binomial_deviance(POWER, (0.0, 0.0, 1.0), pts) < 1e-8


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.floats(0.01, 0.99), st.floats(0.0, 1.0)), min_size=1, max_size=15),
    st.floats(0.0, 1.0),
    st.floats(0.0, 5.0),
    st.floats(0.2, 3.0),
)
def test_deviance_entropy_lower_bound(points, g, d, mu):
    pts = np.array(points)
    p = np.clip(pts[:, 1], 1e-300, 1)
    q = np.clip(1 - pts[:, 1], 1e-300, 1)
    entropy = -2 * np.sum(pts[:, 1] * np.log(p) + (1 - pts[:, 1]) * np.log(q))
    assert binomial_deviance(POWER, (g, d, mu), pts) >= entropy - 1e-9
    assert binomial_deviance(BINORMAL, (g, d), pts) >= entropy - 1e-9


# --- fitting -------------------------------------------------------------------


def test_fit_recovers_power_curve():
    a = np.linspace(0.02, 0.98, 50)
    pts = np.column_stack([a, eval_model(POWER, (0.4, 0.2, 1.0), a)])
    fit = fit_roc_model(pts, POWER)
    assert abs(fit.slope - 0.52) <= 0.02
    assert fit.slope == pytest.approx((1 - fit.gamma) * fit.delta + fit.gamma)


def test_fit_recovers_binormal_curve():
    a = np.linspace(0.02, 0.98, 50)
    pts = np.column_stack([a, eval_model(BINORMAL, (0.25, 1.5), a)])
    fit = fit_roc_model(pts, BINORMAL)
    assert abs(fit.slope - 0.25) <= 0.02
    assert fit.slope == fit.gamma


def test_fit_diagonal_slope_near_one():
    a = np.linspace(0.02, 0.98, 40)
    for kind in (POWER, BINORMAL):
        assert abs(fit_roc_model(np.column_stack([a, a]), kind).slope - 1.0) <= 0.05


def test_fit_perfect_roc_slope_near_zero():
    # vertical to (0, 1), then flat
    a = np.linspace(0.0, 1.0, 41)
    pts = np.vstack([[0.0, 0.0], np.column_stack([a, np.ones_like(a)])])
    assert fit_roc_model(pts, POWER).slope <= 0.05


def test_fit_deterministic_and_never_worse_than_identity():
    rng = np.random.default_rng(0)
    for trial in range(10):
        a = np.sort(rng.uniform(0.01, 0.99, 30))
        p = np.clip(np.sort(rng.uniform(0, 1, 30)), 0, 1)
        pts = np.column_stack([a, p])
        for kind, ident in ((POWER, (0.0, 1.0, 1.0)), (BINORMAL, (1.0, 0.0))):
            f1 = fit_roc_model(pts, kind, seed=trial)
            f2 = fit_roc_model(pts, kind, seed=trial)
            assert f1 == f2
            assert f1.deviance <= binomial_deviance(kind, ident, pts) + 1e-9
            assert f1.deviance >= 0


def test_fit_needs_interior_points():
    with pytest.raises(ValueError):
        fit_roc_model(np.array([[0, 0], [0.5, 0.6], [1, 1]]), POWER)


# --- discrete oracles ------------------------------------------------------------


def test_nu_star_examples():
    D = DiscreteDistribution
    assert nu_star_discrete(D([0.2, 0.8]), D([0.2, 0.8])) == 1.0
    assert nu_star_discrete(D([0.5, 0.5]), D([1.0, 0.0])) == 0.5
    assert nu_star_discrete(D([1.0, 0.0]), D([0.0, 1.0])) == 0.0


def simplex_vectors(n):
    return st.lists(st.integers(0, 20), min_size=n, max_size=n).filter(lambda v: sum(v) > 0).map(
        lambda v: np.array(v, float) / sum(v)
    )


@settings(max_examples=80, deadline=None)
@given(simplex_vectors(5), simplex_vectors(5))
def test_nu_star_equals_subset_infimum(f, h):
    F, H = DiscreteDistribution(f), DiscreteDistribution(h)
    best = 1.0
    for r in range(1, 6):
        for A in itertools.combinations(range(5), r):
            hA = h[list(A)].sum()
            if hA > 0:
                best = min(best, f[list(A)].sum() / hA)
    assert nu_star_discrete(F, H) == pytest.approx(best, abs=1e-12)
    # zero exactly when H charges an atom that F misses
    assert (nu_star_discrete(F, H) == 0) == bool(np.any((h > 0) & (f == 0)))


def test_nu_star_errors():
    with pytest.raises(ValueError):
        DiscreteDistribution([0.5, 0.6])
    with pytest.raises(ValueError):
        nu_star_discrete(DiscreteDistribution([1.0]), DiscreteDistribution([0.5, 0.5]))


def test_condition_B_examples():
    D = DiscreteDistribution
    assert check_condition_B([D([1.0, 0.0]), D([0.0, 1.0])])
    assert check_condition_B([D([0.5, 0.5, 0.0]), D([0.0, 0.5, 0.5])])
    assert not check_condition_B([D([0.5, 0.5]), D([0.3, 0.7])])
    with pytest.raises(ValueError):
        check_condition_B([D([1.0])])


# --- the estimation pipeline -------------------------------------------------------


FAST = MpeConfig(bootstrap=50)


def test_degenerate_scores_give_one():
    est = nu_from_scores(np.full(10, 0.3), np.full(12, 0.3), FAST)
    assert est.value == 1.0 and est.degenerate
    est = estimate_nu(np.zeros((5, 2)), np.zeros((7, 2)), FAST)
    assert est.value == 1.0 and est.degenerate


def test_same_distribution_gives_large_nu():
    rng = np.random.default_rng(0)
    est = estimate_nu(rng.normal(size=(800, 1)), rng.normal(size=(800, 1)), FAST)
    assert est.value >= 0.8


def test_separated_gaussians_give_small_nu():
    rng = np.random.default_rng(1)
    est = estimate_nu(rng.normal(-10, 1, (400, 1)), rng.normal(10, 1, (400, 1)), FAST)
    assert est.value <= 0.1
    assert est.auc > 0.99


def test_mixture_recovers_known_proportion():
    rng = np.random.default_rng(2)
    n = 5000
    H = rng.normal(3, 1, (n, 1))
    comp = rng.random(n) < 0.3
    F = np.where(comp[:, None], rng.normal(3, 1, (n, 1)), rng.normal(-3, 1, (n, 1)))
    est = estimate_nu(F, H, MpeConfig(seed=2))
    assert abs(est.value - 0.3) <= 0.1
    assert est.value == est.fit.slope


def test_estimate_nu_deterministic_and_upper_ci():
    rng = np.random.default_rng(3)
    F, H = rng.normal(0, 1, (300, 1)), rng.normal(1.5, 1, (300, 1))
    a = estimate_nu(F, H, FAST)
    b = estimate_nu(F, H, FAST)
    assert a.value == b.value
    c = estimate_nu(F, H, MpeConfig(bootstrap=50, with_ci=True))
    assert c.upper_ci is not None and 0.0 <= c.upper_ci <= 1.0 + 1e-9


def test_estimate_nu_empty():
    with pytest.raises(ValueError):
        estimate_nu(np.empty((0, 1)), np.ones((3, 1)))
