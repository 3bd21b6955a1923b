import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from classprop.roc import (
    RocCurve,
    bootstrap_envelope,
    curve_at,
    default_grid,
    empirical_roc,
    mann_whitney_auc,
    roc_auc,
)

int_scores = st.lists(st.integers(-5, 5), min_size=1, max_size=40)


def brute_force_roc(alt, null):
    """Rates at every threshold taken from the pooled distinct scores."""
    alt, null = np.asarray(alt, float), np.asarray(null, float)
    ts = np.unique(np.r_[alt, null])[::-1]
    pts = [(0.0, 0.0)] + [(np.mean(null >= t), np.mean(alt >= t)) for t in ts]
    return np.array(pts)


def test_perfect_separation_passes_through_corner():
    c = empirical_roc([0.9, 0.8], [0.2, 0.1])
    assert any((a == 0.0) and (p == 1.0) for a, p in c.points)
    assert roc_auc(c) == 1.0


def test_identical_multisets_on_diagonal():
    s = [0.1, 0.4, 0.4, 0.7, 0.9]
    c = empirical_roc(s, s)
    np.testing.assert_allclose(c.alpha, c.p)
    assert roc_auc(c) == pytest.approx(0.5)


def test_total_tie_is_single_step():
    c = empirical_roc([0.5], [0.5])
    np.testing.assert_array_equal(c.points, [[0, 0], [1, 1]])


def test_auc_trapezoid_examples():
    assert roc_auc(RocCurve(np.array([0, 0.5, 1.0]), np.array([0, 0.5, 1.0]), 2, 2)) == 0.5
    assert roc_auc(RocCurve(np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 1.0]), 1, 1)) == 1.0


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        empirical_roc([], [0.1])
    with pytest.raises(ValueError):
        empirical_roc([np.nan], [0.1])


@settings(max_examples=100, deadline=None)
@given(int_scores, int_scores)
def test_curve_matches_brute_force(alt, null):
    c = empirical_roc(alt, null)
    np.testing.assert_allclose(c.points, brute_force_roc(alt, null), atol=1e-12)
    assert c.alpha[0] == 0 and c.p[0] == 0 and c.alpha[-1] == 1 and c.p[-1] == 1
    assert np.all(np.diff(c.alpha) >= 0) and np.all(np.diff(c.p) >= 0)


@settings(max_examples=100, deadline=None)
@given(int_scores, int_scores)
def test_auc_equals_mann_whitney(alt, null):
    c = empirical_roc(alt, null)
    assert abs(roc_auc(c) - mann_whitney_auc(alt, null)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(int_scores, int_scores)
def test_invariant_to_increasing_transform(alt, null):
    c1 = empirical_roc(alt, null)
    f = lambda s: np.exp(np.asarray(s, float) / 3.0) + 7.0
    c2 = empirical_roc(f(alt), f(null))
    np.testing.assert_array_equal(c1.points, c2.points)


def test_weighted_roc_with_unit_weights_matches_unweighted():
    rng = np.random.default_rng(0)
    a, n = rng.normal(1, 1, 30), rng.normal(0, 1, 25)
    c1 = empirical_roc(a, n)
    c2 = empirical_roc(a, n, np.full(30, 2.0), np.full(25, 0.5))
    np.testing.assert_allclose(c1.points, c2.points)


def test_curve_at_takes_top_of_vertical_runs():
    alpha = np.array([0.0, 0.0, 0.5, 1.0])
    p = np.array([0.0, 0.6, 0.8, 1.0])
    np.testing.assert_allclose(curve_at(alpha, p, [0.0, 0.25, 1.0]), [0.6, 0.7, 1.0])


def test_default_grid_adds_tail_vertices():
    rng = np.random.default_rng(0)
    c = empirical_roc(rng.normal(size=500), rng.normal(size=500))
    g = default_grid(c, 100, tail_from=0.9, tail_max=50)
    assert g[0] == 0 and g[-1] == 1
    assert np.all(np.diff(g) > 0)
    assert np.sum(g >= 0.9) > 10


def test_envelope_single_replicate_collapses():
    rng = np.random.default_rng(1)
    env = bootstrap_envelope(rng.normal(1, 1, 40), rng.normal(0, 1, 40), B=1)
    np.testing.assert_array_equal(env.lower, env.mean_curve)
    np.testing.assert_array_equal(env.upper, env.mean_curve)


def test_envelope_deterministic_and_ordered():
    rng = np.random.default_rng(2)
    a, n = rng.normal(1, 1, 60), rng.normal(0, 1, 50)
    e1 = bootstrap_envelope(a, n, B=50, seed=9)
    e2 = bootstrap_envelope(a, n, B=50, seed=9)
    np.testing.assert_array_equal(e1.mean_curve, e2.mean_curve)
    np.testing.assert_array_equal(e1.lower, e2.lower)
    assert np.all(e1.lower <= e1.mean_curve) and np.all(e1.mean_curve <= e1.upper)
    assert np.all((e1.lower >= 0) & (e1.upper <= 1))
    e3 = bootstrap_envelope(a, n, B=50, seed=10)
    assert not np.array_equal(e1.mean_curve, e3.mean_curve)


def test_envelope_replicate_uses_seeded_dirichlet_weights():
    rng = np.random.default_rng(3)
    a, n = rng.normal(1, 1, 30), rng.normal(0, 1, 30)
    g = np.linspace(0, 1, 11)
    env = bootstrap_envelope(a, n, B=1, seed=4, grid=g)
    w = np.random.default_rng([4, 0])
    c = empirical_roc(a, n, w.standard_exponential(30), w.standard_exponential(30))
    np.testing.assert_allclose(env.mean_curve, c(g), atol=1e-12)


def test_envelope_brackets_diagonal_for_identical_samples():
    fractions = []
    for rep in range(20):
        s = np.random.default_rng(rep).normal(size=100)
        env = bootstrap_envelope(s, s, B=2000, grid=np.linspace(0, 1, 51), seed=rep)
        inside = (env.lower <= env.grid + 1e-12) & (env.grid <= env.upper + 1e-12)
        fractions.append(inside.mean())
    assert np.mean(fractions) >= 0.95


def test_envelope_narrows_with_sample_size():
    grid = np.linspace(0, 1, 21)[1:-1]
    widths = {}
    for n in (100, 10000):
        w = []
        for seed in range(3):
            rng = np.random.default_rng(seed)
            env = bootstrap_envelope(rng.normal(1, 1, n), rng.normal(0, 1, n), B=100, grid=grid, seed=seed)
            w.append(env.upper - env.lower)
        widths[n] = np.median(w, axis=0)
    assert np.all(widths[10000] < widths[100])


def test_envelope_bad_args():
    with pytest.raises(ValueError):
        bootstrap_envelope([1.0], [0.0], B=0)
    with pytest.raises(ValueError):
        bootstrap_envelope([1.0], [0.0], level=1.0)
