"""Multiclass anomaly rejection with histogram classifiers.

Training data exist for classes ``1..M-1`` only; label ``M`` means
"reject as anomalous". The test-distribution risk is estimated without any
class-``M`` sample:

    R_hat(f) = sum_i pi_i R_i(f)  +  [R_0M(f) - sum_i pi_i R_iM(f)]

where ``R_i`` is the class-``i`` error rate, ``R_iM`` the rate of
not rejecting class-``i`` points and ``R_0M`` the rate of not rejecting
test points. Over axis-aligned grids with free per-cell labels, both this
estimate and the true risk are sums of per-cell terms. That makes the
empirical risk minimizer and the supremum of ``|R - R_hat|`` over the whole
family exactly computable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from classprop.dataio import CpeTrial, sample_trial

MAX_CELLS = 10_000_000


@dataclass(frozen=True)
class HistogramClassifier:
    """Regular grid with ``k`` cells per dimension over ``bounds``; labels flat in row-major order."""

    bounds: np.ndarray
    k: int
    cell_labels: np.ndarray

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        labels = np.asarray(self.cell_labels, dtype=int).ravel()
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if labels.size != self.k ** b.shape[0]:
            raise ValueError(f"expected {self.k ** b.shape[0]} cell labels, got {labels.size}")
        if labels.size and labels.min() < 1:
            raise ValueError("cell labels must be >= 1")
        object.__setattr__(self, "bounds", b)
        object.__setattr__(self, "cell_labels", labels)

    @property
    def dim(self) -> int:
        return self.bounds.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cell_labels.size

    @property
    def edges(self) -> list:
        return grid_edges(self.bounds, self.k)

    def cells(self, X) -> np.ndarray:
        return cell_index(X, self.bounds, self.k)

    def predict(self, X) -> np.ndarray:
        return self.cell_labels[self.cells(X)]

    def with_labels(self, labels) -> "HistogramClassifier":
        return HistogramClassifier(self.bounds, self.k, labels)

    def to_json(self) -> str:
        return json.dumps(
            {"bounds": self.bounds.tolist(), "k": int(self.k), "cell_labels": self.cell_labels.tolist()}
        )

    @classmethod
    def from_json(cls, text: str) -> "HistogramClassifier":
        d = json.loads(text)
        return cls(np.array(d["bounds"]), int(d["k"]), np.array(d["cell_labels"]))


def grid_edges(bounds, k: int) -> list:
    edges = []
    for lo, hi in np.atleast_2d(bounds):
        if not hi > lo:
            lo, hi = lo - 0.5, hi + 0.5
        edges.append(np.linspace(lo, hi, k + 1))
    return edges


def cell_index(X, bounds, k: int) -> np.ndarray:
    """Flat row-major cell index; points outside the bounds go to the nearest boundary cell."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    edges = grid_edges(bounds, k)
    if X.shape[1] != len(edges):
        raise ValueError(f"expected {len(edges)} features, got {X.shape[1]}")
    flat = np.zeros(X.shape[0], dtype=np.int64)
    for j, e in enumerate(edges):
        idx = np.clip(np.searchsorted(e, X[:, j], side="right") - 1, 0, k - 1)
        flat = flat * k + idx
    return flat


def data_bounds(trial: CpeTrial) -> np.ndarray:
    """Bounding box of every sample available without class-M labels (training and test)."""
    X = np.vstack(list(trial.train_per_class) + [trial.test_features])
    return np.column_stack([X.min(axis=0), X.max(axis=0)])


def _cell_mass(X, bounds, k) -> np.ndarray:
    X = np.atleast_2d(X)
    if X.shape[0] == 0:
        raise ValueError("empty sample")
    return np.bincount(cell_index(X, bounds, k), minlength=k ** np.atleast_2d(bounds).shape[0]) / X.shape[0]


def conditional_error(f: HistogramClassifier, sample, target: int) -> float:
    """Fraction of ``sample`` that ``f`` does not assign to label ``target``.

    With ``target = i`` on a class-``i`` sample this is the class error
    rate; with ``target = M`` it is the rate of not rejecting.
    """
    sample = np.atleast_2d(np.asarray(sample, dtype=float))
    if sample.shape[0] == 0:
        raise ValueError("empty sample")
    return float(np.mean(f.predict(sample) != target))


@dataclass(frozen=True)
class RiskEstimate:
    total: float
    per_class_terms: np.ndarray
    anomaly_term: float


def _known_classes(trial: CpeTrial):
    M = trial.class_count
    labels = [c for c in trial.observed_classes if c < M]
    return M, labels


def estimate_risk(f: HistogramClassifier, trial: CpeTrial, pi_hat) -> RiskEstimate:
    """Plug-in risk estimate; the anomaly term is left unclamped and may be negative.

    Only classes ``1..M-1`` and the test sample are used, even when the
    trial also carries a class-``M`` training sample.
    """
    M, labels = _known_classes(trial)
    pi_hat = np.asarray(pi_hat, dtype=float)
    if pi_hat.size < M - 1:
        raise ValueError(f"need at least {M - 1} proportion estimates")
    per = np.array([pi_hat[c - 1] * conditional_error(f, trial.train_sample(c), c) for c in labels])
    anomaly = conditional_error(f, trial.test_features, M) - sum(
        pi_hat[c - 1] * conditional_error(f, trial.train_sample(c), M) for c in labels
    )
    return RiskEstimate(float(per.sum() + anomaly), per, float(anomaly))


def empirical_cell_costs(trial: CpeTrial, pi_hat, bounds, k) -> np.ndarray:
    """``cost[A, l-1]``: contribution of cell ``A`` to the estimated risk when labeled ``l``."""
    M, labels = _known_classes(trial)
    pi_hat = np.asarray(pi_hat, dtype=float)
    n_cells = k ** np.atleast_2d(bounds).shape[0]
    weighted = np.zeros((n_cells, M))  # pi_i * m_i(A) in column i-1
    for c in labels:
        weighted[:, c - 1] = pi_hat[c - 1] * _cell_mass(trial.train_sample(c), bounds, k)
    test_mass = _cell_mass(trial.test_features, bounds, k)
    known = weighted[:, : M - 1].sum(axis=1)
    cost = np.empty((n_cells, M))
    for label in range(1, M):
        # sum_{i != l} w_i + n0 - sum_i w_i
        cost[:, label - 1] = test_mass - weighted[:, label - 1]
    cost[:, M - 1] = known
    return cost


def erm_histogram(trial: CpeTrial, pi_hat, k: int, bounds=None) -> HistogramClassifier:
    """Exact empirical risk minimizer over the ``k``-per-dimension grid family.

    Each cell takes the label of least cost; ties go to the smallest label.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    bounds = data_bounds(trial) if bounds is None else np.atleast_2d(bounds)
    if k ** bounds.shape[0] > MAX_CELLS:
        raise MemoryError(f"{k}^{bounds.shape[0]} cells exceed the limit of {MAX_CELLS}")
    cost = empirical_cell_costs(trial, pi_hat, bounds, k)
    return HistogramClassifier(bounds, k, cost.argmin(axis=1) + 1)


# ---------------------------------------------------------------------------
# synthetic ground truth


@dataclass(frozen=True)
class SyntheticTruth:
    """Class-conditional distributions and true class proportions of the test distribution."""

    classes: Sequence
    priors: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.priors, dtype=float)
        if pi.shape != (len(self.classes),) or np.any(pi < 0) or abs(pi.sum() - 1) > 1e-12:
            raise ValueError("priors must be a probability vector with one entry per class")
        object.__setattr__(self, "priors", pi)

    @property
    def class_count(self) -> int:
        return len(self.classes)

    def cell_risks(self, bounds, k) -> np.ndarray:
        """``r[A, l-1]``: true risk contribution of cell ``A`` labeled ``l``."""
        edges = grid_edges(bounds, k)
        joint = np.column_stack([pi * c.cell_masses(edges).ravel() for pi, c in zip(self.priors, self.classes)])
        return joint.sum(axis=1, keepdims=True) - joint

    def risk(self, f: HistogramClassifier) -> float:
        r = self.cell_risks(f.bounds, f.k)
        return float(r[np.arange(f.n_cells), f.cell_labels - 1].sum())

    def best_in_family(self, bounds, k) -> float:
        return float(self.cell_risks(bounds, k).min(axis=1).sum())


def sup_deviation(trial: CpeTrial, pi_hat, k: int, truth: SyntheticTruth, bounds=None) -> float:
    """``sup_f |R(f) - R_hat(f)|`` over every labeling of the grid, computed exactly."""
    bounds = data_bounds(trial) if bounds is None else np.atleast_2d(bounds)
    diff = truth.cell_risks(bounds, k) - empirical_cell_costs(trial, pi_hat, bounds, k)
    return float(max(diff.max(axis=1).sum(), (-diff).max(axis=1).sum()))


def bayes_risk_oracle(truth: SyntheticTruth, n_mc: int = 1_000_000, seed: int = 0, chunk: int = 200_000):
    """Monte Carlo risk of the exact-density Bayes rule: ``(estimate, standard_error)``."""
    rng = np.random.default_rng(seed)
    errors = 0
    done = 0
    while done < n_mc:
        n = min(chunk, n_mc - done)
        counts = rng.multinomial(n, truth.priors)
        X = np.vstack([c.sample(int(m), rng) for c, m in zip(truth.classes, counts)])
        y = np.repeat(np.arange(truth.class_count), counts)
        dens = np.column_stack([pi * c.pdf(X) for pi, c in zip(truth.priors, truth.classes)])
        errors += int(np.sum(dens.argmax(axis=1) != y))
        done += n
    r = errors / n_mc
    return r, math.sqrt(max(r * (1.0 - r), 0.0) / n_mc)


# ---------------------------------------------------------------------------
# consistency experiments


def default_schedule(n: int, d: int) -> int:
    return max(1, math.ceil(n ** (1.0 / (d + 2))))


@dataclass
class RuleReport:
    bayes_risk: float
    bayes_se: float
    rows: list = field(default_factory=list)

    def medians(self, key: str = "excess_risk") -> dict:
        out = {}
        for n in sorted({r["n"] for r in self.rows}):
            out[n] = float(np.median([r[key] for r in self.rows if r["n"] == n]))
        return out

    def to_dict(self) -> dict:
        return {"bayes_risk": self.bayes_risk, "bayes_se": self.bayes_se, "rows": self.rows,
                "median_excess_risk": {str(n): v for n, v in self.medians().items()}}


def exact_pi(truth: SyntheticTruth, trial: CpeTrial):
    return trial.true_proportions


def evaluate_rule(
    truth: SyntheticTruth,
    sizes: Sequence[int],
    schedule: Callable[[int, int], int] = default_schedule,
    seeds: Sequence[int] = range(5),
    pi_source: Callable | None = None,
    n_mc: int = 1_000_000,
    seed: int = 0,
) -> RuleReport:
    """Excess risk of the grid ERM rule over growing sample sizes.

    For every ``n`` and seed a trial with ``n`` training points per known
    class and ``n`` test points is drawn (class ``M`` unobserved), the
    proportions come from ``pi_source(truth, trial)`` (default: MPE-Incomplete),
    and the rule's exact risk is split into approximation error of the grid
    family and estimation error within it.
    """
    if pi_source is None:
        from classprop.cpe import estimate_incomplete

        def pi_source(truth, trial):
            return estimate_incomplete(trial).values

    r_star, se = bayes_risk_oracle(truth, n_mc, seed)
    report = RuleReport(r_star, se)
    d = truth.classes[0].dim
    for n in sizes:
        k = schedule(n, d)
        for s in seeds:
            trial = sample_trial(truth.classes, truth.priors, n, n, True, seed=_trial_seed(seed, n, s))
            pi_hat = np.asarray(pi_source(truth, trial), dtype=float)
            bounds = data_bounds(trial)
            f = erm_histogram(trial, pi_hat, k, bounds)
            risk = truth.risk(f)
            best = truth.best_in_family(bounds, k)
            report.rows.append(
                {
                    "n": int(n),
                    "seed": int(s),
                    "k": int(k),
                    "risk": risk,
                    "excess_risk": risk - r_star,
                    "approximation_error": best - r_star,
                    "estimation_error": risk - best,
                    "sup_deviation": sup_deviation(trial, pi_hat, k, truth, bounds),
                    "pi_hat": [float(v) for v in pi_hat],
                }
            )
    return report


def _trial_seed(seed, n, s) -> int:
    return int(np.random.SeedSequence([int(seed), int(n), int(s)]).generate_state(1)[0])
