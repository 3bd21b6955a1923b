"""Empirical ROC curves, AUC and Bayesian-bootstrap envelopes.

Convention: ``scores_alt`` come from the distribution being detected (F),
``scores_null`` from the reference distribution (H); a higher score means
more F-like. The curve maps the false-positive rate ``alpha = H(score >= t)``
to the detection rate ``p = F(score >= t)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class RocCurve:
    alpha: np.ndarray
    p: np.ndarray
    n_null: int
    n_alt: int

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.alpha, self.p])

    def __call__(self, grid) -> np.ndarray:
        return curve_at(self.alpha, self.p, grid)


@dataclass(frozen=True)
class RocEnvelope:
    grid: np.ndarray
    mean_curve: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    replicates: int

    def as_columns(self) -> dict:
        return {"alpha": self.grid, "p": self.mean_curve, "lower": self.lower, "upper": self.upper}


def _check_scores(scores, name):
    s = np.asarray(scores, dtype=float).ravel()
    if s.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(s)):
        raise ValueError(f"{name} has non-finite entries")
    return s


class _TieGroups:
    """Distinct thresholds in descending order and each score's group index."""

    def __init__(self, scores_alt, scores_null):
        self.alt = _check_scores(scores_alt, "scores_alt")
        self.null = _check_scores(scores_null, "scores_null")
        values = np.unique(np.concatenate([self.alt, self.null]))[::-1]
        self.n_groups = values.size
        neg = -values  # ascending
        self.g_alt = np.searchsorted(neg, -self.alt)
        self.g_null = np.searchsorted(neg, -self.null)

    def curve(self, w_alt=None, w_null=None):
        a = np.bincount(self.g_alt, weights=w_alt, minlength=self.n_groups)
        h = np.bincount(self.g_null, weights=w_null, minlength=self.n_groups)
        p = np.concatenate([[0.0], np.cumsum(a)])
        alpha = np.concatenate([[0.0], np.cumsum(h)])
        p /= p[-1]
        alpha /= alpha[-1]
        # guard the endpoint against cumulative round-off
        p[-1] = alpha[-1] = 1.0
        return np.minimum(alpha, 1.0), np.minimum(p, 1.0)


def empirical_roc(scores_alt, scores_null, weights_alt=None, weights_null=None) -> RocCurve:
    """One vertex per distinct threshold; tied scores move both coordinates at once."""
    groups = _TieGroups(scores_alt, scores_null)
    alpha, p = groups.curve(weights_alt, weights_null)
    return RocCurve(alpha, p, groups.null.size, groups.alt.size)


def curve_at(alpha, p, grid) -> np.ndarray:
    """Evaluate a piecewise-linear ROC at ``grid``; vertical runs take their top value."""
    alpha = np.asarray(alpha, dtype=float)
    p = np.asarray(p, dtype=float)
    last = np.r_[alpha[1:] != alpha[:-1], True]
    return np.interp(np.asarray(grid, dtype=float), alpha[last], p[last])


def roc_auc(c: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    return float(np.sum(np.diff(c.alpha) * (c.p[1:] + c.p[:-1]) / 2.0))


def mann_whitney_auc(scores_alt, scores_null) -> float:
    """P(alt > null) + P(alt == null) / 2 via midranks."""
    alt = _check_scores(scores_alt, "scores_alt")
    null = _check_scores(scores_null, "scores_null")
    ranks = rankdata(np.concatenate([alt, null]))
    u = ranks[: alt.size].sum() - alt.size * (alt.size + 1) / 2.0
    return float(u / (alt.size * null.size))


def default_grid(curve: RocCurve, grid_size: int = 100, tail_from: float = 0.9, tail_max: int = 200):
    """Evenly spaced alpha values plus the curve's own vertices in the right tail."""
    base = np.linspace(0.0, 1.0, grid_size)
    tail = np.unique(curve.alpha[(curve.alpha >= tail_from) & (curve.alpha < 1.0)])
    if tail.size > tail_max:
        tail = tail[np.linspace(0, tail.size - 1, tail_max).round().astype(int)]
    return np.unique(np.concatenate([base, tail]))


def bootstrap_envelope(
    scores_alt,
    scores_null,
    B: int = 200,
    grid_size: int = 100,
    level: float = 0.95,
    seed: int = 0,
    grid=None,
) -> RocEnvelope:
    """Bayesian-bootstrap mean ROC and pointwise quantile band.

    Each replicate draws flat-Dirichlet weights for both samples
    independently (stream ``(seed, replicate)``), recomputes the weighted ROC
    and evaluates it on a shared alpha grid.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    groups = _TieGroups(scores_alt, scores_null)
    if grid is None:
        a0, p0 = groups.curve()
        grid = default_grid(RocCurve(a0, p0, groups.null.size, groups.alt.size), grid_size)
    grid = np.asarray(grid, dtype=float)

    curves = np.empty((B, grid.size))
    for b in range(B):
        rng = np.random.default_rng([seed, b])
        w_alt = rng.standard_exponential(groups.alt.size)
        w_null = rng.standard_exponential(groups.null.size)
        alpha, p = groups.curve(w_alt, w_null)
        curves[b] = curve_at(alpha, p, grid)

    mean = curves.mean(axis=0)
    lower = np.quantile(curves, (1.0 - level) / 2.0, axis=0)
    upper = np.quantile(curves, (1.0 + level) / 2.0, axis=0)
    # mean lies inside the band up to round-off; enforce the ordering exactly
    lower = np.minimum(lower, mean)
    upper = np.maximum(upper, mean)
    return RocEnvelope(grid, mean, lower, upper, level, B)
