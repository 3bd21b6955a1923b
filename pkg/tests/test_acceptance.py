"""End-to-end acceptance checks.

Each test records one PASS/FAIL line through the ``criterion`` fixture; the
lines are repeated in the terminal summary. Runtimes are measured on one core.
"""

import itertools
import time

import numpy as np
import pytest

from classprop import harness
from classprop.cpe import CpeConfig, estimate_binary_rescaled, estimate_incomplete, estimate_projected, project_to_simplex
from classprop.dataio import CpeTrial, DiscreteClass, gaussian_class, sample_trial
from classprop.mcar import HistogramClassifier, SyntheticTruth, estimate_risk, evaluate_rule, sup_deviation
from classprop.mpe import BINORMAL, POWER, DiscreteDistribution, estimate_nu, eval_model, nu_star_discrete, right_slope

from oracles import active_set_projection, grid_projection

pytestmark = pytest.mark.filterwarnings("ignore::classprop.classifier.ConvergenceWarning")

THREE_GAUSS = [gaussian_class([0.0, 0.0]), gaussian_class([4.0, 0.0]), gaussian_class([0.0, 4.0])]
LINE_GAUSS = [gaussian_class([-4.0]), gaussian_class([0.0]), gaussian_class([4.0])]
LINE_TRUTH = SyntheticTruth(LINE_GAUSS, [0.3, 0.3, 0.4])


# --- shared runs, also reused by the determinism check -------------------------------


def discrete_pairs(count, seed=123, n=5000):
    rng = np.random.default_rng(seed)
    loc = np.arange(10.0)
    for _ in range(count):
        f, h = rng.dirichlet(np.ones(10)), rng.dirichlet(np.ones(10))
        F = DiscreteClass(loc, f, 0.1).sample(n, rng)
        H = DiscreteClass(loc, h, 0.1).sample(n, rng)
        yield f, h, F, H


def oracle_rows(count):
    rows = []
    for k, (f, h, F, H) in enumerate(discrete_pairs(count)):
        truth = nu_star_discrete(DiscreteDistribution(f), DiscreteDistribution(h))
        est = estimate_nu(F, H, harness.MpeConfig(seed=k))
        rows.append((truth, est.value))
    return np.array(rows)


def anomaly_config(permutations=10, proportions=harness.DEFAULT_GRID, jobs=1):
    return harness.load_config(
        {
            "datasets": [{"name": "separated", "synthetic": {"classes": [{"mean": [0, 0]}, {"mean": [4, 0]}, {"mean": [0, 4]}]}}],
            "methods": ["mpe_incomplete", "em", "l2", "baseline"],
            "proportions": list(proportions),
            "permutations": permutations,
            "train_size": 300,
            "test_size": 300,
            "seed": 5,
            "jobs": jobs,
        }
    )


def coverage_config(permutations=5, proportions=None):
    return harness.load_config(
        {
            "datasets": [{"name": "binary", "synthetic": {"classes": [{"mean": [0, 0]}, {"mean": [3, 0]}]}}],
            "proportions": proportions or [0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95],
            "permutations": permutations,
            "train_size": 300,
            "test_size": 300,
            "seed": 11,
        }
    )


def sup_dev_rows(n, seeds):
    out = []
    for s in seeds:
        trial = sample_trial(LINE_GAUSS, LINE_TRUTH.priors, n, n, True, s)
        pi_hat = estimate_incomplete(trial, CpeConfig(seed=s)).values
        out.append(sup_deviation(trial, pi_hat, 8, LINE_TRUTH))
    return out


# --- criteria -------------------------------------------------------------------------


def test_c01_nu_hat_matches_discrete_oracle(criterion):
    t = time.perf_counter()
    rows = oracle_rows(20)
    elapsed = time.perf_counter() - t
    err = np.abs(rows[:, 1] - rows[:, 0])
    ok = err.mean() <= 0.15 and np.mean(err <= 0.2) >= 0.8 and elapsed <= 300
    assert criterion(1, ok, f"mean |err| {err.mean():.3f}, within 0.2: {np.mean(err <= 0.2):.0%}, {elapsed:.0f}s")


def test_c02_slope_formulas(criterion):
    # the one-sided difference carries a (1-g)(1+mu)D(D-1)h/2 term, below 1e-3 only for D <= 2
    power_grid = itertools.product((0.1, 0.5, 0.9), (0.1, 1.0, 2.0), (0.5, 1.0, 2.0))
    h = 1e-4
    power_err = max(
        abs((1.0 - eval_model(POWER, (g, d, mu), 1.0 - h)) / h - right_slope(POWER, (g, d, mu)))
        for g, d, mu in power_grid
    )
    h = 1e-6
    bin_err = max(
        abs((1.0 - eval_model(BINORMAL, (g, d), 1.0 - h)) / h - g)
        for g in (0.1, 0.5, 0.9)
        for d in (1.0, 2.0, 5.0)
    )
    ok = power_err <= 1e-3 and bin_err <= 0.05
    assert criterion(2, ok, f"power max err {power_err:.1e}, binormal max err {bin_err:.1e}")


def test_c03_simplex_projection(criterion):
    rng = np.random.default_rng(0)
    V = rng.normal(0, 2, (100, 3))
    exact = max(np.abs(project_to_simplex(v) - active_set_projection(v)).max() for v in V)
    grid = max(np.abs(project_to_simplex(v) - grid_projection(v)).max() for v in V)
    W = rng.normal(0, 3, (1000, 4))
    idem = max(np.abs(project_to_simplex(project_to_simplex(w)) - project_to_simplex(w)).max() for w in W)
    pairs = W.reshape(500, 2, 4)
    ratio = max(
        np.linalg.norm(project_to_simplex(a) - project_to_simplex(b)) / np.linalg.norm(a - b) for a, b in pairs
    )
    ok = exact <= 1e-9 and grid <= 1e-3 and idem <= 1e-12 and ratio <= 1 + 1e-12
    assert criterion(3, ok, f"active-set {exact:.1e}, grid {grid:.1e}, idempotence {idem:.1e}, max Lipschitz ratio {ratio:.3f}")


def test_c04_projected_consistency_trend(criterion):
    pi = np.array([0.2, 0.3, 0.5])
    t = time.perf_counter()
    med = {}
    for n in (250, 4000):
        l1 = [
            np.abs(estimate_projected(sample_trial(THREE_GAUSS, pi, n, n, False, s), CpeConfig(seed=s)).values - pi).sum()
            for s in range(10)
        ]
        med[n] = float(np.median(l1))
    elapsed = time.perf_counter() - t
    ok = med[4000] < med[250] and med[4000] <= 0.15 and elapsed <= 600
    assert criterion(4, ok, f"median l1 n=250 {med[250]:.3f}, n=4000 {med[4000]:.3f}, {elapsed:.0f}s")


def test_c05_unobserved_class_adaptation(criterion):
    rep = harness.run_anomaly_benchmark(anomaly_config())
    padded = [r for r in rep.rows if r["method"] != "mpe_incomplete"]
    bound_ok = all(r["zero_padded"] and r["l1"] >= r["proportion"] for r in padded)
    curves = {(a["method"], a["proportion"]): a["mean_l1"] for a in rep.extra["curves"]}
    high = [p for p in harness.DEFAULT_GRID if p >= 0.3]
    margin = min(curves["baseline", p] - curves["mpe_incomplete", p] for p in high)
    ok = not rep.failures and bound_ok and margin > 0
    detail = f"padded l1 >= p on {len(padded)} rows: {bound_ok}, min baseline - incomplete for p>=0.3: {margin:.3f}"
    assert criterion(5, ok, detail)


def test_c06_rescaled_estimator(criterion):
    loc = np.arange(10.0)
    p2 = np.r_[np.full(5, 0.2), np.zeros(5)]
    e = np.r_[np.zeros(5), np.full(5, 0.2)]
    p1 = 0.4 * p2 + 0.6 * e
    nu12 = nu_star_discrete(DiscreteDistribution(p1), DiscreteDistribution(p2))
    classes = [DiscreteClass(loc, p1, 0.1), DiscreteClass(loc, p2, 0.1)]
    adj, raw = [], []
    for s in range(10):
        est = estimate_binary_rescaled(sample_trial(classes, [0.5, 0.5], 2000, 2000, False, s), CpeConfig(seed=s))
        adj.append(abs(est.values[0] - 0.5))
        raw.append(abs(est.flags["unadjusted"][0] - 0.5))
    ok = abs(nu12 - 0.4) <= 1e-12 and np.median(adj) <= 0.15 and np.median(raw) >= 0.15
    assert criterion(6, ok, f"nu* {nu12:.3f}, median err rescaled {np.median(adj):.3f}, unadjusted {np.median(raw):.3f}")


def test_c07_risk_estimator_exact(criterion):
    loc = np.arange(6.0)
    masses = ([0.5, 0.3, 0.2, 0, 0, 0], [0, 0.1, 0.3, 0.4, 0.2, 0], [0, 0, 0.1, 0.2, 0.3, 0.4])
    priors = np.array([0.3, 0.3, 0.4])
    truth = SyntheticTruth([DiscreteClass(loc, m) for m in masses], priors)
    train = tuple(c.exact_sample(100) for c in truth.classes[:2])
    test = np.vstack([c.exact_sample(int(p * 1000)) for c, p in zip(truth.classes, priors)])
    trial = CpeTrial(train, test, priors, (1, 2), 0)
    rng = np.random.default_rng(0)
    bounds = np.array([[-0.5, 5.5]])
    worst = 0.0
    for _ in range(100):
        f = HistogramClassifier(bounds, 6, rng.integers(1, 4, 6))
        worst = max(worst, abs(estimate_risk(f, trial, priors).total - truth.risk(f)))
    assert criterion(7, worst <= 1e-12, f"max |R_hat - R| over 100 classifiers {worst:.1e}")


def test_c08_sup_deviation_shrinks(criterion):
    t = time.perf_counter()
    med = {n: float(np.median(sup_dev_rows(n, range(10)))) for n in (100, 10000)}
    elapsed = time.perf_counter() - t
    ok = med[10000] < 0.5 * med[100] and elapsed <= 300
    assert criterion(8, ok, f"median sup deviation n=100 {med[100]:.3f}, n=10000 {med[10000]:.3f}, {elapsed:.0f}s")


def test_c09_excess_risk_trend(criterion):
    rep = evaluate_rule(LINE_TRUTH, [500, 2000, 20000], seeds=range(5), n_mc=1_000_000, seed=0)
    med = rep.medians()
    seq = [med[n] for n in (500, 2000, 20000)]
    ok = seq[2] <= 0.1 and seq[0] >= seq[1] >= seq[2]
    detail = f"R* {rep.bayes_risk:.4f}, median excess " + ", ".join(f"n={n}: {v:.4f}" for n, v in zip((500, 2000, 20000), seq))
    assert criterion(9, ok, detail)


def test_c10_binary_ci_coverage(criterion):
    t = time.perf_counter()
    res = harness.run_ci_coverage(coverage_config())
    elapsed = time.perf_counter() - t
    first = [r["covered"] for r in res["rows"] if r["class"] == 1]
    cov = float(np.mean(first))
    ok = len(first) == 50 and not res["failures"] and cov >= 0.9 and elapsed <= 900
    assert criterion(10, ok, f"coverage of pi_1 {cov:.2f} over {len(first)} trials, pooled {res['pooled']:.2f}, {elapsed:.0f}s")


def test_c11_determinism(criterion):
    checks = {}
    checks["oracle"] = np.array_equal(oracle_rows(2), oracle_rows(2))
    small = anomaly_config(permutations=2, proportions=[0.1, 0.5, 0.9])
    a = harness.run_anomaly_benchmark(small).comparable_rows()
    b = harness.run_anomaly_benchmark(small).comparable_rows()
    c = harness.run_anomaly_benchmark(harness.replace(small, jobs=2)).comparable_rows()
    checks["anomaly"] = a == b == c
    cov = coverage_config(permutations=1, proportions=[0.3, 0.7])
    checks["coverage"] = harness.run_ci_coverage(cov)["rows"] == harness.run_ci_coverage(cov)["rows"]
    checks["sup_deviation"] = sup_dev_rows(200, [0, 1]) == sup_dev_rows(200, [0, 1])
    r1 = evaluate_rule(LINE_TRUTH, [300], seeds=range(2), n_mc=50_000).rows
    r2 = evaluate_rule(LINE_TRUTH, [300], seeds=range(2), n_mc=50_000).rows
    checks["excess_risk"] = r1 == r2
    failed = [k for k, v in checks.items() if not v]
    assert criterion(11, not failed, f"identical rows on repeat: {', '.join(checks)}" + (f"; differ: {failed}" if failed else ""))
