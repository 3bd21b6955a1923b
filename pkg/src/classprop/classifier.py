"""Gaussian-kernel logistic regression and cross-validated hyperparameter search.

The model is ``f(x) = sum_j a_j k(x, c_j) + b`` with an unpenalized bias
and the RKHS penalty ``(lam / 2) a^T K_cc a``. The centers ``c_j`` are all
training rows, or a fixed-size subset of them when the sample is large
(``max_support``). Fitting is damped Newton (IRLS) with backtracking, so the
objective never increases between iterations.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, solve
from scipy.special import expit, log_expit

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
DEFAULT_SIGMA_FACTORS = (0.25, 0.5, 1.0, 2.0, 4.0)


class ConvergenceWarning(UserWarning):
    pass


def gaussian_kernel(x, y, sigma: float) -> float:
    """``exp(-||x - y||^2 / (2 sigma^2))``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal dimensions")
    return float(np.exp(-np.sum((x - y) ** 2) / (2.0 * sigma**2)))


def kernel_matrix(X: np.ndarray, Y: np.ndarray, sigma: float) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    sq = (X**2).sum(1)[:, None] + (Y**2).sum(1)[None, :] - 2.0 * X @ Y.T
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-sq / (2.0 * sigma**2))


@dataclass(frozen=True)
class KlrModel:
    support_points: np.ndarray
    dual_weights: np.ndarray
    bias: float
    sigma: float
    lam: float
    converged: bool = True
    iterations: int = 0

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.size == 0:
            return np.empty(0)
        if X.ndim != 2 or X.shape[1] != self.support_points.shape[1]:
            raise ValueError(
                f"expected {self.support_points.shape[1]} features, got shape {X.shape}"
            )
        out = np.empty(X.shape[0])
        # chunked to bound the kernel block size
        step = max(1, 2_000_000 // max(1, self.support_points.shape[0]))
        for s in range(0, X.shape[0], step):
            K = kernel_matrix(X[s : s + step], self.support_points, self.sigma)
            out[s : s + step] = K @ self.dual_weights + self.bias
        return out


def predict_posterior(m: KlrModel, X) -> np.ndarray:
    """Posterior probability of the positive class, strictly inside (0, 1)."""
    p = expit(m.decision_function(X))
    tiny = np.finfo(float).tiny
    return np.clip(p, tiny, 1.0 - np.finfo(float).epsneg)


def _support_subset(X: np.ndarray, max_support: int | None) -> np.ndarray:
    """Centers independent of row order: subsample from the lexicographically sorted rows."""
    if max_support is None or X.shape[0] <= max_support:
        return X
    Xs = X[np.lexsort(X.T[::-1])]
    pick = np.random.default_rng(X.shape[0]).choice(X.shape[0], max_support, replace=False)
    return Xs[np.sort(pick)]


def _objective(z, Phi, t, lam, Kcc):
    a = z[:-1]
    eta = Phi @ z
    # -[t log s(eta) + (1-t) log s(-eta)]
    nll = -np.mean(t * log_expit(eta) + (1.0 - t) * log_expit(-eta))
    return nll + 0.5 * lam * a @ Kcc @ a


def train_klr(
    X,
    y,
    sigma: float,
    lam: float,
    max_iter: int = 100,
    tol: float = 1e-8,
    max_support: int | None = 400,
) -> KlrModel:
    """Fit kernel logistic regression by damped Newton on the dual weights.

    Parameters
    ----------
    X : (n, d) array
    y : (n,) array of binary labels; the larger value is the positive class
    sigma, lam : kernel bandwidth and regularization strength, both > 0
    max_iter, tol : Newton iteration cap and gradient-norm tolerance
    max_support : cap on the number of kernel centers (``None`` for all rows)

    On non-convergence a :class:`ConvergenceWarning` is issued and the best
    iterate is returned with ``converged=False``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if not (sigma > 0 and lam > 0):
        raise ValueError("sigma and lam must be positive")
    classes = np.unique(y)
    if classes.size != 2:
        raise ValueError(f"training requires exactly two classes, got {classes.size}")
    t = (y == classes[1]).astype(float)
    n = X.shape[0]

    C = _support_subset(X, max_support)
    Kcc = kernel_matrix(C, C, sigma)
    Phi = np.hstack([kernel_matrix(X, C, sigma), np.ones((n, 1))])
    m = C.shape[0]
    reg = np.zeros((m + 1, m + 1))
    reg[:m, :m] = lam * Kcc

    z = np.zeros(m + 1)
    prior = t.mean()
    z[-1] = np.log(prior / (1.0 - prior))
    f = _objective(z, Phi, t, lam, Kcc)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(Phi @ z)
        grad = Phi.T @ (p - t) / n + reg @ z
        if np.linalg.norm(grad) <= tol:
            converged = True
            break
        w = p * (1.0 - p)
        H = (Phi.T * w) @ Phi / n + reg
        H[np.diag_indices_from(H)] += 1e-10 * (1.0 + np.abs(np.diag(H)))
        try:
            step = solve(H, grad, assume_a="pos")
        except (LinAlgError, ValueError):
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        # backtracking keeps the objective non-increasing
        s = 1.0
        slope = grad @ step
        while True:
            z_new = z - s * step
            f_new = _objective(z_new, Phi, t, lam, Kcc)
            if f_new <= f - 1e-4 * s * slope or s < 1e-10:
                break
            s *= 0.5
        if f_new > f:
            # no descent possible at machine precision
            converged = np.linalg.norm(grad) <= 1e3 * tol
            break
        decrease = f - f_new
        z, f = z_new, f_new
        if decrease <= 1e-15 * max(1.0, abs(f)):
            p = expit(Phi @ z)
            grad = Phi.T @ (p - t) / n + reg @ z
            converged = np.linalg.norm(grad) <= max(tol, 1e-6)
            break
    if not converged:
        warnings.warn(
            f"KLR did not reach gradient tolerance {tol} in {it} iterations "
            f"(sigma={sigma:g}, lam={lam:g}); returning best iterate",
            ConvergenceWarning,
            stacklevel=2,
        )
    return KlrModel(C, z[:-1].copy(), float(z[-1]), float(sigma), float(lam), converged, it)


def training_log_likelihood(m: KlrModel, X, y) -> float:
    y = np.asarray(y)
    t = (y == np.unique(y)[1]).astype(float)
    eta = m.decision_function(X)
    return float(np.sum(t * log_expit(eta) + (1.0 - t) * log_expit(-eta)))


def median_pairwise_distance(X, max_rows: int = 1000, seed: int = 0) -> float:
    X = np.asarray(X, dtype=float)
    if X.shape[0] > max_rows:
        X = X[np.random.default_rng(seed).choice(X.shape[0], max_rows, replace=False)]
    sq = (X**2).sum(1)[:, None] + (X**2).sum(1)[None, :] - 2.0 * X @ X.T
    iu = np.triu_indices(X.shape[0], k=1)
    d = np.sqrt(np.maximum(sq[iu], 0.0))
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def default_sigma_grid(X, seed: int = 0) -> tuple:
    med = median_pairwise_distance(X, seed=seed)
    return tuple(med * f for f in DEFAULT_SIGMA_FACTORS)


def stratified_folds(y, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold id per row, with every class spread round-robin over the folds."""
    y = np.asarray(y)
    fold = np.empty(y.size, dtype=int)
    offset = 0
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        fold[idx] = (np.arange(idx.size) + offset) % folds
        offset += idx.size
    return fold


def auc_score(pos_scores, neg_scores) -> float:
    """Tie-corrected Mann-Whitney AUC."""
    from classprop.roc import mann_whitney_auc

    return mann_whitney_auc(pos_scores, neg_scores)


def select_hyperparameters(
    X,
    y,
    sigma_grid=None,
    lambda_grid=DEFAULT_LAMBDA_GRID,
    folds: int = 3,
    criterion: str = "accuracy",
    seed: int = 0,
    max_rows: int | None = 600,
    max_support: int | None = 200,
):
    """Grid search maximizing mean cross-validated accuracy or AUC.

    Returns ``(sigma, lam, score)``. Ties go to the larger sigma, then the
    larger lambda. At most ``max_rows`` rows (stratified subsample) enter the
    search to keep its cost bounded.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if criterion not in ("accuracy", "auc"):
        raise ValueError(f"unknown criterion {criterion!r}")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size != 2:
        raise ValueError("hyperparameter search needs exactly two classes")
    if max_rows is not None and y.size > max_rows:
        keep = np.concatenate(
            [
                rng.choice(np.flatnonzero(y == c), max(folds, int(round(max_rows * k / y.size))), replace=False)
                for c, k in zip(classes, counts)
            ]
        )
        keep.sort()
        X, y = X[keep], y[keep]
        counts = np.array([np.sum(y == c) for c in classes])
    if counts.min() < folds:
        raise ValueError(
            f"cannot stratify {folds} folds: smallest class has {counts.min()} rows"
        )
    if sigma_grid is None:
        sigma_grid = default_sigma_grid(X, seed)
    sigma_grid = list(sigma_grid)
    lambda_grid = list(lambda_grid)
    if not sigma_grid or not lambda_grid:
        raise ValueError("grids must be non-empty")

    fold = stratified_folds(y, folds, rng)
    scores = np.zeros((len(sigma_grid), len(lambda_grid)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for f in range(folds):
            tr, te = fold != f, fold == f
            for i, s in enumerate(sigma_grid):
                for j, lam in enumerate(lambda_grid):
                    m = train_klr(X[tr], y[tr], s, lam, max_support=max_support)
                    p = predict_posterior(m, X[te])
                    pos = y[te] == classes[1]
                    if criterion == "accuracy":
                        scores[i, j] += np.mean((p > 0.5) == pos)
                    else:
                        scores[i, j] += auc_score(p[pos], p[~pos])
    scores /= folds
    best = None
    for i, s in enumerate(sigma_grid):
        for j, lam in enumerate(lambda_grid):
            key = (scores[i, j], s, lam)
            if best is None or key > best[0]:
                best = (key, s, lam, scores[i, j])
    _, s, lam, score = best
    logger.debug("selected sigma=%g lam=%g (%s=%.4f)", s, lam, criterion, score)
    return float(s), float(lam), float(score)


def train_one_vs_rest(samples, sigma: float, lam: float, max_support: int | None = 400):
    """One model per class (a single model when there are two classes)."""
    X = np.vstack(samples)
    labels = np.concatenate([np.full(len(s), i) for i, s in enumerate(samples)])
    targets = [1] if len(samples) == 2 else range(len(samples))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return [train_klr(X, (labels == c).astype(int), sigma, lam, max_support=max_support) for c in targets]


def posterior_matrix(models, X) -> np.ndarray:
    """Class posteriors, shape ``(n, M)``; one-vs-rest outputs normalized to sum to 1."""
    if len(models) == 1:
        p = predict_posterior(models[0], X)
        return np.column_stack([1.0 - p, p])
    P = np.column_stack([predict_posterior(m, X) for m in models])
    return P / P.sum(axis=1, keepdims=True)


def select_multiclass(
    samples,
    sigma_grid=None,
    lambda_grid=DEFAULT_LAMBDA_GRID,
    folds: int = 3,
    seed: int = 0,
    max_rows: int | None = 600,
    max_support: int | None = 200,
):
    """Grid search of one-vs-rest KLR maximizing cross-validated multiclass accuracy.

    Same tie rule and row cap as :func:`select_hyperparameters`.
    """
    if len(samples) < 2:
        raise ValueError("need at least two classes")
    if len(samples) == 2:
        X = np.vstack(samples)
        y = np.r_[np.ones(len(samples[0])), np.zeros(len(samples[1]))]
        return select_hyperparameters(
            X, y, sigma_grid, lambda_grid, folds, "accuracy", seed, max_rows, max_support
        )
    rng = np.random.default_rng(seed)
    total = sum(len(s) for s in samples)
    if max_rows is not None and total > max_rows:
        samples = [
            s[np.sort(rng.choice(len(s), max(folds, int(round(max_rows * len(s) / total))), replace=False))]
            for s in samples
        ]
    if min(len(s) for s in samples) < folds:
        raise ValueError(f"cannot stratify {folds} folds: a class has fewer rows")
    X = np.vstack(samples)
    y = np.concatenate([np.full(len(s), i) for i, s in enumerate(samples)])
    if sigma_grid is None:
        sigma_grid = default_sigma_grid(X, seed)
    fold = stratified_folds(y, folds, rng)
    scores = np.zeros((len(sigma_grid), len(lambda_grid)))
    for f in range(folds):
        tr, te = fold != f, fold == f
        train_sets = [X[tr & (y == c)] for c in range(len(samples))]
        for i, s in enumerate(sigma_grid):
            for j, lam in enumerate(lambda_grid):
                models = train_one_vs_rest(train_sets, s, lam, max_support)
                pred = posterior_matrix(models, X[te]).argmax(axis=1)
                scores[i, j] += np.mean(pred == y[te])
    scores /= folds
    best = max(
        ((scores[i, j], s, lam) for i, s in enumerate(sigma_grid) for j, lam in enumerate(lambda_grid))
    )
    return float(best[1]), float(best[2]), float(best[0])
