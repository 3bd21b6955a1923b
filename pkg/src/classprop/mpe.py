"""Mixture proportion estimation from the right-endpoint slope of a fitted ROC.

Given samples from ``F`` and ``H``, the largest ``nu`` with
``F = (1 - nu) G + nu H`` equals the slope of the optimal ROC of the
F-vs-H detection problem at false-positive rate 1. The slope is read off a
parametric curve fitted to a smoothed empirical ROC:

``binormal_linear``  ``(1 - g) Q(Q^-1(a) + D) + g a``            slope ``g``
``power_linear``     ``(1 - g) (1 + D (a^-mu - 1))^(-1/mu) + g a``  slope ``(1 - g) D + g``

Both are fitted by minimizing the binomial deviance against the curve.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit
from scipy.stats import norm

from classprop import classifier as klr
from classprop.roc import RocEnvelope, bootstrap_envelope, mann_whitney_auc

logger = logging.getLogger(__name__)

BINORMAL = "binormal_linear"
POWER = "power_linear"
MODEL_KINDS = (BINORMAL, POWER)
CLAMP = 1e-9

_N_PARAMS = {BINORMAL: 2, POWER: 3}


def _check_params(kind, params):
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    params = tuple(float(v) for v in params)
    if len(params) != _N_PARAMS[kind]:
        raise ValueError(f"{kind} takes {_N_PARAMS[kind]} parameters, got {len(params)}")
    gamma, delta = params[:2]
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if not delta >= 0.0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if kind == POWER and not params[2] > 0.0:
        raise ValueError(f"mu must be > 0, got {params[2]}")
    return params


def _model(kind, params, alpha):
    alpha = np.asarray(alpha, dtype=float)
    gamma, delta = params[0], params[1]
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        if kind == BINORMAL:
            curved = norm.cdf(norm.ppf(alpha) + delta)
        else:
            mu = params[2]
            # (1 + D (a^-mu - 1))^(-1/mu), evaluated in logs; a = 0 gives 0
            inner = 1.0 + delta * np.expm1(-mu * np.log(alpha))
            curved = np.where(alpha > 0, np.exp(-np.log(inner) / mu), 0.0)
    return (1.0 - gamma) * curved + gamma * alpha


def eval_model(kind: str, params, alpha):
    """Exact model value at ``alpha`` (scalar or array); no clamping."""
    params = _check_params(kind, params)
    alpha = np.asarray(alpha, dtype=float)
    if np.any((alpha < 0) | (alpha > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    out = _model(kind, params, alpha)
    return float(out) if out.ndim == 0 else out


def right_slope(kind: str, params) -> float:
    gamma, delta = _check_params(kind, params)[:2]
    if kind == BINORMAL:
        return gamma
    return (1.0 - gamma) * delta + gamma


def _interior(points):
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("ROC points must be an (n, 2) array of (alpha, p)")
    if np.any((pts < 0) | (pts > 1)):
        raise ValueError("ROC points must lie in [0, 1]^2")
    # the models are pinned at alpha = 0 and alpha = 1; those points carry no information
    keep = (pts[:, 0] > 0) & (pts[:, 0] < 1)
    return pts[keep, 0], pts[keep, 1]


def _deviance(kind, params, alpha, p):
    f = np.clip(_model(kind, params, alpha), CLAMP, 1.0 - CLAMP)
    return float(-2.0 * np.sum(p * np.log(f) + (1.0 - p) * np.log1p(-f)))


def binomial_deviance(kind: str, params, roc_points) -> float:
    """``-2 sum_j [p_j log f(a_j) + (1 - p_j) log(1 - f(a_j))]`` over interior points."""
    params = _check_params(kind, params)
    alpha, p = _interior(roc_points)
    return _deviance(kind, params, alpha, p)


@dataclass(frozen=True)
class RocFit:
    model_kind: str
    gamma: float
    delta: float
    mu: float | None
    deviance: float
    slope: float
    warning: bool = False

    @property
    def params(self) -> tuple:
        if self.model_kind == BINORMAL:
            return (self.gamma, self.delta)
        return (self.gamma, self.delta, self.mu)


def _to_params(kind, z):
    gamma = float(expit(z[0]))
    delta = float(np.exp(np.clip(z[1], -30.0, 30.0)))
    if kind == BINORMAL:
        return (gamma, delta)
    return (gamma, delta, float(np.exp(np.clip(z[2], -10.0, 10.0))))


def _to_z(params):
    g = np.clip(params[0], 1e-6, 1.0 - 1e-6)
    return np.array([logit(g)] + [np.log(v) for v in params[1:]])


def _initial_grid(kind):
    gammas, deltas, mus = (0.1, 0.5, 0.9), (0.1, 1.0, 5.0), (0.5, 1.0, 2.0)
    if kind == BINORMAL:
        return list(itertools.product(gammas, deltas))
    return list(itertools.product(gammas, deltas, mus))


def _identity_params(kind):
    return (1.0, 0.0) if kind == BINORMAL else (0.0, 1.0, 1.0)


def _make_fit(kind, params, alpha, p, warn=False):
    params = tuple(params)
    return RocFit(
        kind,
        params[0],
        params[1],
        params[2] if kind == POWER else None,
        _deviance(kind, params, alpha, p),
        right_slope(kind, params),
        warn,
    )


def fit_roc_model(roc_points, kind: str = POWER, restarts: int = 8, seed: int = 0) -> RocFit:
    """Lowest-deviance fit over multi-start Nelder-Mead.

    Starts come from a fixed (gamma, delta[, mu]) grid, pruned to the
    ``restarts`` best by initial deviance; starts after the first get a small
    seeded perturbation. Parameters are optimized as ``logit(gamma)``,
    ``log(delta)``, ``log(mu)``. The result never has higher deviance than
    the identity curve.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    alpha, p = _interior(roc_points)
    if alpha.size < 3:
        raise ValueError(f"need at least 3 interior ROC points, got {alpha.size}")
    rng = np.random.default_rng(seed)

    def objective(z):
        return _deviance(kind, _to_params(kind, z), alpha, p)

    starts = sorted(_initial_grid(kind), key=lambda q: _deviance(kind, q, alpha, p))
    starts = starts[: max(1, restarts)]
    best_init = _make_fit(kind, starts[0], alpha, p)
    best_z, best_val = None, np.inf
    for i, q in enumerate(starts):
        z0 = _to_z(q)
        if i > 0:
            z0 = z0 + 0.05 * rng.standard_normal(z0.size)
        res = minimize(
            objective,
            z0,
            method="Nelder-Mead",
            options={"xatol": 1e-7, "fatol": 1e-10, "maxiter": 4000, "adaptive": True},
        )
        if res.fun < best_val:
            best_z, best_val = res.x, float(res.fun)

    identity = _make_fit(kind, _identity_params(kind), alpha, p)
    if not best_val < best_init.deviance - 1e-12:
        fit = replace(best_init, warning=True)
    else:
        fit = _make_fit(kind, _to_params(kind, best_z), alpha, p)
    if identity.deviance < fit.deviance:
        fit = identity
    return fit


# ---------------------------------------------------------------------------
# the nu-hat pipeline


@dataclass(frozen=True)
class MpeConfig:
    """Knobs of the nu-hat pipeline.

    ``sigma`` fixes the kernel bandwidth (stage-2 mode: only lambda is
    searched, by AUC). ``fixed_lambda`` together with ``sigma`` skips the
    search entirely. Without a fixed bandwidth the pair is searched on its
    own: ``pair_selection="auc"`` picks (sigma, lambda) by AUC,
    ``"two_stage"`` picks sigma by accuracy first and then lambda by AUC. ``scoring`` selects in-sample posteriors or
    ``cross_fit`` (out-of-fold) posteriors for the ROC.
    """

    model_kind: str = POWER
    bootstrap: int = 200
    grid_size: int = 100
    level: float = 0.95
    restarts: int = 8
    folds: int = 3
    sigma: float | None = None
    fixed_lambda: float | None = None
    sigma_grid: Sequence[float] | None = None
    lambda_grid: Sequence[float] = klr.DEFAULT_LAMBDA_GRID
    max_support: int | None = 400
    cv_max_rows: int | None = 600
    cv_max_support: int | None = 200
    scoring: str = "cross_fit"
    pair_selection: str = "auc"
    raw_vertices: bool = False
    with_ci: bool = False
    seed: int = 0

    def with_seed(self, seed: int) -> "MpeConfig":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class NuEstimate:
    value: float
    fit: RocFit | None
    auc: float
    upper_ci: float | None = None
    envelope: RocEnvelope | None = field(default=None, repr=False)
    degenerate: bool = False
    sigma: float | None = None
    lam: float | None = None

    @property
    def ci_inverted(self) -> bool:
        return self.upper_ci is not None and self.upper_ci < self.value


def select_for_pair(X, y, cfg: MpeConfig):
    """Two-stage hyperparameter choice for one binary problem: ``(sigma, lam)``."""
    if cfg.sigma is not None and cfg.fixed_lambda is not None:
        return cfg.sigma, cfg.fixed_lambda
    sigma = cfg.sigma
    if sigma is None and cfg.pair_selection == "auc":
        sigma, lam, _ = klr.select_hyperparameters(
            X, y, cfg.sigma_grid, cfg.lambda_grid, cfg.folds, "auc", cfg.seed,
            cfg.cv_max_rows, cfg.cv_max_support,
        )
        return sigma, lam
    if cfg.pair_selection not in ("auc", "two_stage"):
        raise ValueError(f"unknown pair_selection {cfg.pair_selection!r}")
    if sigma is None:
        sigma, _, _ = klr.select_hyperparameters(
            X, y, cfg.sigma_grid, cfg.lambda_grid, cfg.folds, "accuracy", cfg.seed,
            cfg.cv_max_rows, cfg.cv_max_support,
        )
    _, lam, _ = klr.select_hyperparameters(
        X, y, [sigma], cfg.lambda_grid, cfg.folds, "auc", cfg.seed + 1,
        cfg.cv_max_rows, cfg.cv_max_support,
    )
    return sigma, lam


def _scores(X, y, sigma, lam, cfg):
    if cfg.scoring == "in_sample":
        model = klr.train_klr(X, y, sigma, lam, max_support=cfg.max_support)
        return klr.predict_posterior(model, X)
    if cfg.scoring == "cross_fit":
        # posterior logits are comparable across folds only approximately; good enough for ranking
        fold = klr.stratified_folds(y, cfg.folds, np.random.default_rng([cfg.seed, 7]))
        out = np.empty(y.size)
        for f in range(cfg.folds):
            tr = fold != f
            model = klr.train_klr(X[tr], y[tr], sigma, lam, max_support=cfg.max_support)
            out[~tr] = klr.predict_posterior(model, X[~tr])
        return out
    raise ValueError(f"unknown scoring mode {cfg.scoring!r}")


def nu_from_scores(scores_F, scores_H, cfg: MpeConfig, sigma=None, lam=None) -> NuEstimate:
    """Smooth the ROC of ``scores_F`` vs ``scores_H`` and read off the fitted slope."""
    scores_F = np.asarray(scores_F, dtype=float)
    scores_H = np.asarray(scores_H, dtype=float)
    auc = mann_whitney_auc(scores_F, scores_H)
    allv = np.concatenate([scores_F, scores_H])
    if np.ptp(allv) <= 1e-12 * max(1.0, np.abs(allv).max()):
        return NuEstimate(1.0, None, auc, 1.0 if cfg.with_ci else None, None, True, sigma, lam)
    env = bootstrap_envelope(scores_F, scores_H, cfg.bootstrap, cfg.grid_size, cfg.level, cfg.seed)
    if cfg.raw_vertices:
        from classprop.roc import empirical_roc

        points = empirical_roc(scores_F, scores_H).points
    else:
        points = np.column_stack([env.grid, env.mean_curve])
    fit = fit_roc_model(points, cfg.model_kind, cfg.restarts, cfg.seed)
    upper = None
    if cfg.with_ci:
        lower_fit = fit_roc_model(
            np.column_stack([env.grid, env.lower]), POWER, cfg.restarts, cfg.seed
        )
        upper = lower_fit.slope
        if upper < fit.slope:
            logger.info("upper CI %.4f below point estimate %.4f", upper, fit.slope)
    return NuEstimate(fit.slope, fit, auc, upper, env, False, sigma, lam)


def estimate_nu(sample_F, sample_H, cfg: MpeConfig | None = None) -> NuEstimate:
    """Estimate ``nu*(F, H)`` from samples of ``F`` and ``H``.

    A kernel logistic regression separates the two samples, its posteriors
    trace out an empirical ROC, the Bayesian-bootstrap mean curve is fitted
    with ``cfg.model_kind`` and the fitted right-endpoint slope is returned.
    With ``cfg.with_ci`` an upper confidence bound comes from a power-linear
    fit to the lower envelope.
    """
    cfg = cfg or MpeConfig()
    F = np.asarray(sample_F, dtype=float)
    H = np.asarray(sample_H, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    if H.ndim == 1:
        H = H[:, None]
    if F.shape[0] == 0 or H.shape[0] == 0:
        raise ValueError("both samples must be non-empty")
    X = np.vstack([F, H])
    y = np.r_[np.ones(F.shape[0]), np.zeros(H.shape[0])]
    if np.all(X == X[0]):
        return NuEstimate(1.0, None, 0.5, 1.0 if cfg.with_ci else None, None, True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", klr.ConvergenceWarning)
        sigma, lam = select_for_pair(X, y, cfg)
        s = _scores(X, y, sigma, lam, cfg)
    return nu_from_scores(s[: F.shape[0]], s[F.shape[0] :], cfg, sigma, lam)


# ---------------------------------------------------------------------------
# discrete oracles


@dataclass(frozen=True)
class DiscreteDistribution:
    masses: np.ndarray
    atoms: tuple = ()

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        if m.ndim != 1 or np.any(m < 0) or abs(m.sum() - 1.0) > 1e-12:
            raise ValueError("masses must be nonnegative and sum to 1")
        object.__setattr__(self, "masses", m)
        if not self.atoms:
            object.__setattr__(self, "atoms", tuple(range(m.size)))
        elif len(self.atoms) != m.size:
            raise ValueError("one atom id per mass is required")

    @property
    def support(self) -> set:
        return {a for a, m in zip(self.atoms, self.masses) if m > 0}


def nu_star_discrete(F: DiscreteDistribution, H: DiscreteDistribution) -> float:
    """``min_{a: H(a) > 0} F(a) / H(a)``, capped at 1."""
    if tuple(F.atoms) != tuple(H.atoms):
        raise ValueError("F and H must share the atom universe")
    if H.masses.sum() <= 0:
        raise ValueError("H has zero total mass")
    pos = H.masses > 0
    return float(min(1.0, np.min(F.masses[pos] / H.masses[pos])))


def check_condition_B(dists: Sequence[DiscreteDistribution]) -> bool:
    """True iff every distribution has an atom outside the union of the others' supports."""
    if len(dists) < 2:
        raise ValueError("need at least two distributions")
    supports = [d.support for d in dists]
    for i, s in enumerate(supports):
        others = set().union(*(t for j, t in enumerate(supports) if j != i))
        if not s - others:
            return False
    return True
