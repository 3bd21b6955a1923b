"""Class proportion estimators for an unlabeled test sample.

MPE-based estimators set ``pi_i = nu(test, class_i)``:

* ``mpe_incomplete``: one estimate per observed class, the unobserved
  remainder gets ``1 - sum``;
* ``mpe_projected``: the vector of estimates projected onto the simplex;
* ``mpe_joint``: all binormal-linear ROC fits solved together under
  ``sum(gamma) == 1``;
* ``mpe_rescaled``: the two-class estimator that corrects for overlap
  between the classes.

Comparators: EM prior adjustment of classifier posteriors, ``L2``
distance between kernel density estimates, and the classify-and-count
baseline. All estimators share a :class:`TrialContext`, which caches the
expensive pieces (hyperparameters, classifier scores, smoothed ROCs) so
several methods can run on one trial without refitting.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.optimize import minimize_scalar

from classprop import classifier as klr
from classprop import mpe
from classprop.dataio import CpeTrial, standardize_trial
from classprop.roc import bootstrap_envelope

logger = logging.getLogger(__name__)


class IndistinguishableClassesError(ValueError):
    """The two training classes are too similar for the rescaled estimator."""


@dataclass(frozen=True)
class CpeConfig:
    mpe: mpe.MpeConfig = field(default_factory=mpe.MpeConfig)
    standardize: bool = True
    score_raw_incomplete: bool = False
    rescale_guard: float = 0.05
    em_tol: float = 1e-8
    em_max_iter: int = 500
    kde_tol: float = 1e-10
    kde_max_iter: int = 200_000
    joint_max_iter: int = 500
    joint_tol: float = 1e-10
    ci_level: float = 0.95
    seed: int = 0


@dataclass
class ProportionEstimate:
    method: str
    values: np.ndarray
    raw_values: np.ndarray
    ci: list | None = None
    flags: dict = field(default_factory=dict)

    def scored_values(self, raw: bool = False) -> np.ndarray:
        return self.raw_values if raw else self.values

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "values": [float(v) for v in self.values],
            "raw_values": [float(v) for v in self.raw_values],
        }
        if self.ci is not None:
            out["ci"] = [[float(lo), float(hi)] for lo, hi in self.ci]
        if self.flags:
            out["flags"] = {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in self.flags.items()}
        return out


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum(x) = 1}`` by sort and threshold."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("expected a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _subseed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass
class _Pair:
    scores_F: np.ndarray
    scores_H: np.ndarray
    sigma: float
    lam: float
    estimate: mpe.NuEstimate


class TrialContext:
    """Shared, lazily computed state for running estimators on one trial."""

    def __init__(self, trial: CpeTrial, cfg: CpeConfig | None = None):
        self.cfg = cfg or CpeConfig()
        self.original = trial
        self.trial = standardize_trial(trial)[0] if self.cfg.standardize else trial
        self._pairs: dict = {}

    @property
    def observed(self) -> tuple:
        return self.trial.observed_classes

    @property
    def samples(self) -> list:
        return self.trial.train_per_class

    @property
    def test(self) -> np.ndarray:
        return self.trial.test_features

    def seed(self, *keys) -> int:
        return _subseed(self.cfg.seed, self.trial.seed, *keys)

    @cached_property
    def stage1(self):
        """(sigma, lambda) chosen by multiclass accuracy on the training classes, or None."""
        if len(self.samples) < 2:
            return None
        m = self.cfg.mpe
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", klr.ConvergenceWarning)
            sigma, lam, _ = klr.select_multiclass(
                self.samples, m.sigma_grid, m.lambda_grid, m.folds, self.seed(1),
                m.cv_max_rows, m.cv_max_support,
            )
        return sigma, lam

    def _sample(self, key):
        if key == 0:
            return self.test
        return self.trial.train_sample(key)

    def pair(self, f_key: int, h_key: int) -> _Pair:
        """ROC pipeline for nu(P_f, P_h); key 0 is the test sample, others are class ids."""
        key = (f_key, h_key)
        if key in self._pairs:
            return self._pairs[key]
        F, H = self._sample(f_key), self._sample(h_key)
        if len(F) == 0 or len(H) == 0:
            raise ValueError("empty sample in MPE pair")
        cfg = self.cfg.mpe.with_seed(self.seed(2, f_key, h_key))
        if self.stage1 is not None and cfg.sigma is None:
            cfg = replace(cfg, sigma=self.stage1[0])
        X = np.vstack([F, H])
        y = np.r_[np.ones(len(F)), np.zeros(len(H))]
        if np.all(X == X[0]):
            est = mpe.NuEstimate(1.0, None, 0.5, 1.0, None, True)
            result = _Pair(np.zeros(len(F)), np.zeros(len(H)), np.nan, np.nan, est)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", klr.ConvergenceWarning)
                sigma, lam = mpe.select_for_pair(X, y, cfg)
                s = mpe._scores(X, y, sigma, lam, cfg)
            est = mpe.nu_from_scores(s[: len(F)], s[len(F) :], cfg, sigma, lam)
            result = _Pair(s[: len(F)], s[len(F) :], sigma, lam, est)
        self._pairs[key] = result
        return result

    def nu_test(self, label: int) -> mpe.NuEstimate:
        return self.pair(0, label).estimate

    def nu_vector(self) -> np.ndarray:
        return np.array([self.nu_test(c).value for c in self.observed])

    @cached_property
    def ovr_models(self):
        sigma, lam = self.stage1
        return klr.train_one_vs_rest(self.samples, sigma, lam, self.cfg.mpe.max_support)

    @cached_property
    def test_posteriors(self) -> np.ndarray:
        return klr.posterior_matrix(self.ovr_models, self.test)


def _context(trial, cfg, ctx) -> TrialContext:
    if ctx is not None:
        return ctx
    return TrialContext(trial, cfg)


def _require_full(trial: CpeTrial, what: str):
    if not trial.fully_observed:
        raise ValueError(f"{what} needs training data for every class")


def _require_test(trial: CpeTrial):
    if trial.test_features.shape[0] == 0:
        raise ValueError("empty test sample")


# ---------------------------------------------------------------------------
# MPE-based estimators


def estimate_incomplete(trial: CpeTrial, cfg: CpeConfig | None = None, ctx=None) -> ProportionEstimate:
    """``pi_i = nu(test, class_i)`` per observed class; the unobserved class gets the remainder.

    ``raw_values`` are unclamped (the remainder may be negative), ``values``
    clamp each entry to [0, 1] without renormalizing. When every class is
    observed the remainder is not part of the vector and is reported in
    ``flags["remainder"]``.
    """
    _require_test(trial)
    ctx = _context(trial, cfg, ctx)
    if not ctx.observed:
        raise ValueError("at least one observed class is required")
    nus = ctx.nu_vector()
    remainder = 1.0 - nus.sum()
    raw = nus.copy() if trial.fully_observed else np.append(nus, remainder)
    flags = {"remainder": remainder}
    if any(ctx.nu_test(c).degenerate for c in ctx.observed):
        flags["degenerate"] = True
    return ProportionEstimate("mpe_incomplete", np.clip(raw, 0.0, 1.0), raw, None, flags)


def estimate_projected(trial: CpeTrial, cfg: CpeConfig | None = None, ctx=None) -> ProportionEstimate:
    _require_full(trial, "MPE-Projected")
    _require_test(trial)
    ctx = _context(trial, cfg, ctx)
    raw = ctx.nu_vector()
    return ProportionEstimate("mpe_projected", project_to_simplex(raw), raw)


def _joint_terms(gamma, delta, curves):
    return np.array(
        [mpe._deviance(mpe.BINORMAL, (g, d), a, p) for g, d, (a, p) in zip(gamma, delta, curves)]
    )


def _joint_gamma_grad(gamma, delta, curves):
    from scipy.stats import norm

    grad = np.empty(len(curves))
    for i, (a, p) in enumerate(curves):
        c = norm.cdf(norm.ppf(a) + delta[i])
        f = (1.0 - gamma[i]) * c + gamma[i] * a
        inside = (f > mpe.CLAMP) & (f < 1.0 - mpe.CLAMP)
        fc = np.clip(f, mpe.CLAMP, 1.0 - mpe.CLAMP)
        dB_df = -2.0 * (p / fc - (1.0 - p) / (1.0 - fc))
        grad[i] = np.sum(np.where(inside, dB_df * (a - c), 0.0))
    return grad


def joint_fit(curves, max_iter: int = 500, tol: float = 1e-10, init=None):
    """Minimize the summed binormal-linear deviance subject to ``sum(gamma) == 1``.

    ``curves`` holds ``(alpha, p)`` interior points per class. Alternates a
    per-class line search over ``log(delta)`` with a projected-gradient step
    on ``gamma`` (Armijo backtracking); neither block can increase the
    objective. Returns ``(gamma, delta, history, converged)``.
    """
    if init is None:
        fits = [mpe.fit_roc_model(np.column_stack(c), mpe.BINORMAL) for c in curves]
        gamma = project_to_simplex(np.array([f.gamma for f in fits]))
        delta = np.array([max(f.delta, 1e-6) for f in fits])
    else:
        gamma = project_to_simplex(np.asarray(init[0], dtype=float))
        delta = np.asarray(init[1], dtype=float).copy()
    terms = _joint_terms(gamma, delta, curves)
    obj = terms.sum()
    history = [obj]
    step = 1e-3
    converged = False
    lo, hi = np.log(1e-6), np.log(50.0)
    for _ in range(max_iter):
        start = obj
        for i, (a, p) in enumerate(curves):
            res = minimize_scalar(
                lambda v: mpe._deviance(mpe.BINORMAL, (gamma[i], np.exp(v)), a, p),
                bounds=(lo, hi),
                method="bounded",
                options={"xatol": 1e-9},
            )
            if res.fun < terms[i]:
                delta[i] = np.exp(res.x)
                terms[i] = res.fun
        obj = terms.sum()

        g = _joint_gamma_grad(gamma, delta, curves)
        t = step * 4.0
        while True:
            cand = project_to_simplex(gamma - t * g)
            diff = cand - gamma
            cand_terms = _joint_terms(cand, delta, curves)
            if cand_terms.sum() <= obj + g @ diff + (diff @ diff) / (2.0 * t) or t < 1e-14:
                break
            t *= 0.5
        if cand_terms.sum() < obj:
            gamma, terms, step = cand, cand_terms, t
            obj = terms.sum()
        history.append(obj)
        if start - obj <= tol * (1.0 + abs(obj)):
            converged = True
            break
    return gamma, delta, history, converged


def estimate_joint(trial: CpeTrial, cfg: CpeConfig | None = None, ctx=None) -> ProportionEstimate:
    """Joint binormal-linear fit of all test-vs-class ROCs with proportions summing to one."""
    _require_full(trial, "MPE-Joint")
    _require_test(trial)
    ctx = _context(trial, cfg, ctx)
    curves = []
    for c in ctx.observed:
        env = ctx.nu_test(c).envelope
        if env is None:
            grid = np.linspace(0, 1, 101)
            curves.append(mpe._interior(np.column_stack([grid, grid])))
        else:
            curves.append(mpe._interior(np.column_stack([env.grid, env.mean_curve])))
    gamma, delta, history, converged = joint_fit(curves, ctx.cfg.joint_max_iter, ctx.cfg.joint_tol)
    flags = {"converged": converged, "objective": history[-1], "iterations": len(history) - 1}
    if not converged:
        logger.warning("joint fit stopped after %d iterations without converging", len(history) - 1)
    return ProportionEstimate("mpe_joint", gamma.copy(), gamma.copy(), None, flags)


def estimate_binary_rescaled(trial: CpeTrial, cfg: CpeConfig | None = None, ctx=None) -> ProportionEstimate:
    """Two-class estimator ``(1 - nu(test, P2)) / (1 - nu(P1, P2))`` and its mirror image.

    Raises :class:`IndistinguishableClassesError` when a denominator falls
    below ``cfg.rescale_guard``.
    """
    _require_full(trial, "the rescaled estimator")
    _require_test(trial)
    if trial.class_count != 2:
        raise ValueError("the rescaled estimator is defined for two classes")
    ctx = _context(trial, cfg, ctx)
    nu_02 = ctx.nu_test(2).value
    nu_01 = ctx.nu_test(1).value
    nu_12 = ctx.pair(1, 2).estimate.value
    nu_21 = ctx.pair(2, 1).estimate.value
    den1, den2 = 1.0 - nu_12, 1.0 - nu_21
    guard = ctx.cfg.rescale_guard
    if den1 < guard or den2 < guard:
        raise IndistinguishableClassesError(
            f"classes statistically indistinguishable (1 - nu12 = {den1:.3g}, 1 - nu21 = {den2:.3g})"
        )
    raw = np.array([(1.0 - nu_02) / den1, (1.0 - nu_01) / den2])
    flags = {"nu_12": nu_12, "nu_21": nu_21, "unadjusted": np.array([1.0 - nu_02, 1.0 - nu_01])}
    return ProportionEstimate("mpe_rescaled", np.clip(raw, 0.0, 1.0), raw, None, flags)


# ---------------------------------------------------------------------------
# comparators


def em_proportions(posteriors, train_priors, tol: float = 1e-8, max_iter: int = 500, start=None):
    """EM re-estimation of class priors from posteriors computed under ``train_priors``.

    Returns ``(pi, iterates)``; iteration starts from the uniform vector
    unless ``start`` is given and stops once the l1 change is at most ``tol``.
    """
    P = np.asarray(posteriors, dtype=float)
    train_priors = np.asarray(train_priors, dtype=float)
    M = P.shape[1]
    pi = np.full(M, 1.0 / M) if start is None else np.asarray(start, dtype=float)
    iterates = [pi]
    for _ in range(max_iter):
        w = P * (pi / train_priors)
        w /= w.sum(axis=1, keepdims=True)
        new = w.mean(axis=0)
        new /= new.sum()
        change = np.abs(new - pi).sum()
        pi = new
        iterates.append(pi)
        if change <= tol:
            break
    return pi, iterates


def estimate_em(trial: CpeTrial, cfg: CpeConfig | None = None, ctx=None) -> ProportionEstimate:
    _require_full(trial, "EM")
    _require_test(trial)
    ctx = _context(trial, cfg, ctx)
    sizes = np.array([len(s) for s in ctx.samples], dtype=float)
    pi, iterates = em_proportions(ctx.test_posteriors, sizes / sizes.sum(), ctx.cfg.em_tol, ctx.cfg.em_max_iter)
    return ProportionEstimate("em", pi, pi.copy(), None, {"iterations": len(iterates) - 1})


def silverman_bandwidth(X, sd=None) -> np.ndarray:
    """Per-dimension rule-of-thumb bandwidth for a Gaussian product kernel.

    ``sd`` overrides the sample standard deviation (per dimension).
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if sd is None:
        sd = X.std(axis=0, ddof=1) if n > 1 else np.ones(d)
    sd = np.where(np.asarray(sd) > 0, sd, 1.0)
    return sd * (4.0 / ((d + 2.0) * n)) ** (1.0 / (d + 4.0))


def _class_sd(S) -> np.ndarray:
    return S.std(axis=0, ddof=1) if len(S) > 1 else np.ones(S.shape[1])


def kde_inner_product(A, hA, B, hB, chunk: int = 512) -> float:
    """``integral of kde_A * kde_B`` for Gaussian product kernels, in closed form."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    var = hA**2 + hB**2
    norm_const = np.prod(1.0 / np.sqrt(2.0 * np.pi * var))
    Bs = B / np.sqrt(var)
    total = 0.0
    for s in range(0, A.shape[0], chunk):
        As = A[s : s + chunk] / np.sqrt(var)
        sq = (As**2).sum(1)[:, None] + (Bs**2).sum(1)[None, :] - 2.0 * As @ Bs.T
        total += np.exp(-0.5 * np.maximum(sq, 0.0)).sum()
    return float(norm_const * total / (A.shape[0] * B.shape[0]))


def simplex_qp(G, c, tol: float = 1e-10, max_iter: int = 200_000):
    """Minimize ``x' G x - 2 c' x`` over the simplex by projected gradient.

    Stops when the projected-gradient step moves ``x`` by at most ``tol``.
    """
    G = np.asarray(G, dtype=float)
    c = np.asarray(c, dtype=float)
    M = c.size
    L = 2.0 * max(np.linalg.eigvalsh(G).max(), 1e-300)
    x = np.full(M, 1.0 / M)
    converged = False
    for _ in range(max_iter):
        grad = 2.0 * (G @ x - c)
        new = project_to_simplex(x - grad / L)
        moved = np.abs(new - x).max()
        x = new
        if moved <= tol:
            converged = True
            break
    return x, converged


def estimate_l2_kde(trial: CpeTrial, cfg: CpeConfig | None = None, ctx=None) -> ProportionEstimate:
    """Mixture weights minimizing the L2 distance between KDEs of the classes and of the test sample."""
    _require_full(trial, "the L2 comparator")
    _require_test(trial)
    ctx = _context(trial, cfg, ctx)
    samples = ctx.samples
    hs = [silverman_bandwidth(s) for s in samples]
    # the test sample is a mixture of the classes; its total spread would oversmooth it
    within = np.mean([_class_sd(s) for s in samples], axis=0)
    h0 = silverman_bandwidth(ctx.test, within)
    M = len(samples)
    G = np.empty((M, M))
    for i in range(M):
        for j in range(i, M):
            G[i, j] = G[j, i] = kde_inner_product(samples[i], hs[i], samples[j], hs[j])
    c = np.array([kde_inner_product(samples[i], hs[i], ctx.test, h0) for i in range(M)])
    pi, converged = simplex_qp(G, c, ctx.cfg.kde_tol, ctx.cfg.kde_max_iter)
    return ProportionEstimate("l2", pi, pi.copy(), None, {"converged": converged})


def estimate_baseline(trial: CpeTrial, cfg: CpeConfig | None = None, ctx=None) -> ProportionEstimate:
    """Label frequencies of the arg-max one-vs-rest KLR prediction on the test sample."""
    _require_full(trial, "the baseline")
    _require_test(trial)
    ctx = _context(trial, cfg, ctx)
    pred = ctx.test_posteriors.argmax(axis=1)
    pi = np.bincount(pred, minlength=len(ctx.samples)) / pred.size
    return ProportionEstimate("baseline", pi, pi.copy())


# ---------------------------------------------------------------------------
# confidence intervals


def confidence_intervals(trial: CpeTrial, level: float = 0.95, cfg: CpeConfig | None = None, ctx=None):
    """Per-class ``(lower, upper)`` bounds on the proportions.

    The upper bound of an observed class is the right-endpoint slope of a
    power-linear fit to the lower ROC envelope at ``level``. The lower bound
    of class ``i`` is ``1 - sum_{j != i} upper_j``, floored at 0. An
    unobserved class has no envelope; its upper bound is 1.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    ctx = _context(trial, cfg, ctx)
    m = ctx.cfg.mpe
    uppers = []
    for c in ctx.observed:
        pair = ctx.pair(0, c)
        if pair.estimate.degenerate:
            uppers.append(1.0)
            continue
        env = bootstrap_envelope(pair.scores_F, pair.scores_H, m.bootstrap, m.grid_size, level, ctx.seed(2, 0, c))
        fit = mpe.fit_roc_model(np.column_stack([env.grid, env.lower]), mpe.POWER, m.restarts, ctx.seed(2, 0, c))
        # a proportion never exceeds 1, so capping keeps the bound valid
        uppers.append(min(max(fit.slope, 0.0), 1.0))
    if not trial.fully_observed:
        uppers.append(1.0)
    uppers = np.array(uppers)
    total = uppers.sum()
    return [(max(0.0, 1.0 - (total - u)), float(u)) for u in uppers]


# ---------------------------------------------------------------------------
# dispatch

METHODS = {
    "mpe_incomplete": estimate_incomplete,
    "mpe_projected": estimate_projected,
    "mpe_joint": estimate_joint,
    "mpe_rescaled": estimate_binary_rescaled,
    "em": estimate_em,
    "l2": estimate_l2_kde,
    "baseline": estimate_baseline,
}


def _observed_view(trial: CpeTrial) -> CpeTrial:
    k = len(trial.observed_classes)
    return CpeTrial(
        trial.train_per_class,
        trial.test_features,
        np.full(k, 1.0 / k),
        tuple(range(1, k + 1)),
        trial.seed,
    )


def estimate(method: str, trial: CpeTrial, cfg: CpeConfig | None = None, ctx=None) -> ProportionEstimate:
    """Run ``method`` on ``trial``.

    Methods that need every class run on the observed classes only when one
    is missing, and report 0 for the missing class.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    if method == "mpe_incomplete" or trial.fully_observed:
        return METHODS[method](trial, cfg, ctx)
    view = _observed_view(trial)
    # the unobserved class is always the last, so a context built on the full trial fits the view
    if ctx is None or ctx.observed != view.observed_classes:
        ctx = TrialContext(view, cfg if ctx is None else ctx.cfg)
    est = METHODS[method](view, cfg, ctx)
    missing = trial.class_count - len(trial.observed_classes)
    pad = np.zeros(missing)
    est.values = np.concatenate([est.values, pad])
    est.raw_values = np.concatenate([est.raw_values, pad])
    est.flags["zero_padded"] = True
    return est
