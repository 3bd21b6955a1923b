"""Datasets, file loaders, standardization and CPE trial construction.

Two sources of data are supported. Real labeled datasets are read from CSV
(a ``label`` column plus numeric features) or from the sparse
``<label> <index>:<value>`` format and then split into trials with
:func:`make_cpe_trial`. Synthetic class-conditional distributions
(:class:`GaussianMixtureClass`, :class:`DiscreteClass`) can be sampled
directly with :func:`sample_trial`; they also expose exact cell masses on
axis-aligned grids, which the anomaly-rejection module uses as ground truth.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import norm


class DataError(ValueError):
    """Malformed input file or infeasible trial request."""


@dataclass(frozen=True)
class Dataset:
    """Labeled feature matrix with 1-based integer class ids."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=int)
        if X.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        if y.shape != (X.shape[0],):
            raise DataError("labels must have one entry per feature row")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain non-finite entries")
        if y.size and (y.min() < 1 or y.max() > self.class_count):
            raise DataError(f"labels must lie in 1..{self.class_count}")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count + 1)[1:]

    def by_class(self, label: int) -> np.ndarray:
        return self.features[self.labels == label]


@dataclass(frozen=True)
class CpeTrial:
    """One class-proportion-estimation problem.

    ``train_per_class[j]`` holds the training sample of class
    ``observed_classes[j]`` (1-based ids). ``true_proportions`` covers all
    ``M`` classes, including an unobserved one. ``test_labels`` is the hidden
    ground truth of the test sample and is never read by estimators.
    """

    train_per_class: list
    test_features: np.ndarray
    true_proportions: np.ndarray
    observed_classes: tuple
    seed: int
    test_labels: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        pi = np.asarray(self.true_proportions, dtype=float)
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise DataError("true proportions must lie on the simplex")
        if len(self.train_per_class) != len(self.observed_classes):
            raise DataError("one training sample per observed class is required")
        object.__setattr__(self, "true_proportions", pi)
        object.__setattr__(self, "observed_classes", tuple(int(c) for c in self.observed_classes))
        object.__setattr__(
            self, "train_per_class", [np.asarray(x, dtype=float) for x in self.train_per_class]
        )
        object.__setattr__(self, "test_features", np.asarray(self.test_features, dtype=float))

    @property
    def class_count(self) -> int:
        return len(self.true_proportions)

    @property
    def fully_observed(self) -> bool:
        return len(self.observed_classes) == self.class_count

    def train_sample(self, label: int) -> np.ndarray:
        return self.train_per_class[self.observed_classes.index(label)]

    def fingerprint(self) -> bytes:
        """Byte string identifying the trial content, for determinism checks."""
        parts = [np.ascontiguousarray(x).tobytes() for x in self.train_per_class]
        parts.append(np.ascontiguousarray(self.test_features).tobytes())
        parts.append(self.true_proportions.tobytes())
        parts.append(repr((self.observed_classes, self.seed)).encode())
        return b"|".join(parts)


# ---------------------------------------------------------------------------
# loaders


def load_csv(path) -> Dataset:
    """Read a CSV file with a header row and an integer ``label`` column."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if "label" not in header:
        raise DataError(f"{path}: missing 'label' column")
    label_col = header.index("label")
    feature_cols = [j for j in range(len(header)) if j != label_col]
    if not feature_cols:
        raise DataError(f"{path}: no feature columns")
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: empty file (header only)")

    X = np.empty((len(body), len(feature_cols)))
    y = np.empty(len(body), dtype=int)
    for i, row in enumerate(body):
        lineno = i + 2
        if len(row) != len(header):
            raise DataError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
        try:
            value = float(row[label_col])
        except ValueError:
            raise DataError(f"{path}: row {lineno}, column 'label': non-numeric label {row[label_col]!r}")
        if not value.is_integer():
            raise DataError(f"{path}: row {lineno}, column 'label': label must be an integer")
        if value < 1:
            raise DataError(f"{path}: row {lineno}, column 'label': labels must be >= 1")
        y[i] = int(value)
        for k, j in enumerate(feature_cols):
            try:
                X[i, k] = float(row[j])
            except ValueError:
                raise DataError(
                    f"{path}: row {lineno}, column {header[j]!r}: non-numeric value {row[j]!r}"
                )
            if not math.isfinite(X[i, k]):
                raise DataError(f"{path}: row {lineno}, column {header[j]!r}: non-finite value")
    return Dataset(X, y, int(y.max()))


def load_sparse(path) -> Dataset:
    """Read ``<label> <index>:<value> ...`` lines (1-based indices) into a dense dataset."""
    path = Path(path)
    labels = []
    entries = []
    dim = 0
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                label = float(tokens[0])
            except ValueError:
                raise DataError(f"{path}: line {lineno}: malformed label {tokens[0]!r}")
            if not label.is_integer() or label < 1:
                raise DataError(f"{path}: line {lineno}: labels must be integers >= 1")
            row = {}
            for tok in tokens[1:]:
                idx, sep, val = tok.partition(":")
                try:
                    if not sep:
                        raise ValueError
                    idx, val = int(idx), float(val)
                except ValueError:
                    raise DataError(f"{path}: line {lineno}: malformed token {tok!r}")
                if idx <= 0:
                    raise DataError(f"{path}: line {lineno}: index must be >= 1, got {idx}")
                if not math.isfinite(val):
                    raise DataError(f"{path}: line {lineno}: non-finite value in {tok!r}")
                row[idx] = val
                dim = max(dim, idx)
            labels.append(int(label))
            entries.append(row)
    if not labels:
        raise DataError(f"{path}: empty file")
    X = np.zeros((len(labels), dim))
    for i, row in enumerate(entries):
        for idx, val in row.items():
            X[i, idx - 1] = val
    y = np.array(labels)
    return Dataset(X, y, int(y.max()))


# ---------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(mean, scale)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale


def standardize(d: Dataset) -> tuple[Dataset, Standardizer]:
    """Zero-mean, unit-variance columns; constant columns map to 0 with scale 1."""
    st = Standardizer.fit(d.features)
    return Dataset(st.apply(d.features), d.labels, d.class_count), st


def standardize_trial(trial: CpeTrial) -> tuple[CpeTrial, Standardizer]:
    """Standardize with statistics of the pooled training data, applied to every sample."""
    st = Standardizer.fit(np.vstack(trial.train_per_class))
    return (
        CpeTrial(
            [st.apply(x) for x in trial.train_per_class],
            st.apply(trial.test_features),
            trial.true_proportions,
            trial.observed_classes,
            trial.seed,
            trial.test_labels,
        ),
        st,
    )


# ---------------------------------------------------------------------------
# trial construction


def largest_remainder_counts(props, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, closest to ``total * props``.

    Leftover units go to the largest fractional parts; ties favor the lower
    class index.
    """
    props = np.asarray(props, dtype=float)
    raw = props * total
    counts = np.floor(raw).astype(int)
    left = total - counts.sum()
    frac = raw - counts
    order = sorted(range(len(props)), key=lambda i: (-frac[i], i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def _check_simplex(props, tol=1e-9) -> np.ndarray:
    props = np.asarray(props, dtype=float)
    if props.ndim != 1 or np.any(props < -tol) or abs(props.sum() - 1.0) > tol:
        raise DataError(f"target proportions {props.tolist()} are not on the simplex")
    props = np.clip(props, 0.0, None)
    return props / props.sum()


def make_cpe_trial(
    d: Dataset,
    target_props,
    train_sizes,
    test_size: int,
    unobserved_last: bool = False,
    seed: int = 0,
) -> CpeTrial:
    """Split a dataset into per-class training samples and a test mixture.

    The test sample has exactly ``largest_remainder_counts(target_props,
    test_size)`` rows per class; all draws are without replacement and train
    and test rows never overlap.
    """
    M = d.class_count
    props = _check_simplex(target_props)
    if len(props) != M:
        raise DataError(f"expected {M} target proportions, got {len(props)}")
    train_sizes = np.broadcast_to(np.asarray(train_sizes, dtype=int), (M,))
    test_counts = largest_remainder_counts(props, test_size)
    observed = list(range(1, M)) if unobserved_last else list(range(1, M + 1))

    rng = np.random.default_rng(seed)
    train, test_rows, test_labels = [], [], []
    for c in range(1, M + 1):
        idx = np.flatnonzero(d.labels == c)
        n_train = int(train_sizes[c - 1]) if c in observed else 0
        need = n_train + int(test_counts[c - 1])
        if need > idx.size:
            raise DataError(
                f"class {c}: requested {need} instances ({n_train} train + "
                f"{test_counts[c - 1]} test) but only {idx.size} available"
            )
        idx = rng.permutation(idx)
        if c in observed:
            train.append(d.features[idx[:n_train]])
        test_rows.append(idx[n_train:need])
        test_labels.append(np.full(need - n_train, c))
    test_idx = np.concatenate(test_rows)
    test_lab = np.concatenate(test_labels)
    order = rng.permutation(test_idx.size)
    return CpeTrial(
        train,
        d.features[test_idx[order]],
        test_counts / test_size if test_size else props,
        tuple(observed),
        seed,
        test_lab[order],
    )


# ---------------------------------------------------------------------------
# synthetic class-conditional distributions


@dataclass(frozen=True)
class GaussianMixtureClass:
    """Mixture of axis-aligned Gaussians; ``stds`` are per-component, per-dimension."""

    weights: tuple
    means: tuple
    stds: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        sd = np.broadcast_to(np.atleast_2d(np.asarray(self.stds, dtype=float)), mu.shape)
        if w.shape != (mu.shape[0],) or abs(w.sum() - 1) > 1e-12 or np.any(w < 0):
            raise DataError("mixture weights must be a probability vector, one per component")
        if np.any(sd <= 0):
            raise DataError("standard deviations must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", np.array(sd))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + z * self.stds[comp]

    def pdf(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.zeros(X.shape[0])
        for w, mu, sd in zip(self.weights, self.means, self.stds):
            out += w * np.prod(norm.pdf(X, mu, sd), axis=1)
        return out

    def cell_masses(self, edges: Sequence[np.ndarray]) -> np.ndarray:
        """Probability of every grid cell, outer cells extended to infinity.

        ``edges[d]`` holds the ``k+1`` boundaries of dimension ``d``. The
        result has shape ``(k_1, ..., k_d)``.
        """
        total = 0.0
        for w, mu, sd in zip(self.weights, self.means, self.stds):
            per_dim = []
            for j, e in enumerate(edges):
                cuts = np.asarray(e, dtype=float).copy()
                cuts[0], cuts[-1] = -np.inf, np.inf
                per_dim.append(np.diff(norm.cdf(cuts, mu[j], sd[j])))
            outer = per_dim[0]
            for p in per_dim[1:]:
                outer = np.multiply.outer(outer, p)
            total = total + w * outer
        return total


def gaussian_class(mean, std=1.0) -> GaussianMixtureClass:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    return GaussianMixtureClass((1.0,), (mean,), (np.broadcast_to(std, mean.shape),))


@dataclass(frozen=True)
class DiscreteClass:
    """Finitely many atoms (rows of ``locations``) with optional Gaussian jitter.

    With ``jitter == 0`` samples land exactly on the atoms.
    """

    locations: np.ndarray
    masses: np.ndarray
    jitter: float = 0.0

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float)
        if loc.ndim == 1:
            loc = loc[:, None]
        m = np.asarray(self.masses, dtype=float)
        if m.shape != (loc.shape[0],) or np.any(m < 0) or abs(m.sum() - 1) > 1e-12:
            raise DataError("atom masses must be a probability vector, one per atom")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "masses", m)

    @property
    def dim(self) -> int:
        return self.locations.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        atoms = rng.choice(len(self.masses), size=n, p=self.masses)
        X = self.locations[atoms]
        if self.jitter > 0:
            X = X + self.jitter * rng.standard_normal(X.shape)
        return X

    def pdf(self, X: np.ndarray) -> np.ndarray:
        """Density of the jittered atoms; with no jitter, the atom mass at exact matches."""
        X = np.atleast_2d(X)
        if self.jitter > 0:
            out = np.zeros(X.shape[0])
            for loc, m in zip(self.locations, self.masses):
                out += m * np.prod(norm.pdf(X, loc, self.jitter), axis=1)
            return out
        out = np.zeros(X.shape[0])
        for loc, m in zip(self.locations, self.masses):
            out += m * np.all(X == loc, axis=1)
        return out

    def exact_sample(self, n: int) -> np.ndarray:
        """Sample whose empirical distribution equals the atom masses exactly.

        Requires ``n * masses`` to be integral.
        """
        counts = self.masses * n
        rounded = np.rint(counts)
        if np.any(np.abs(counts - rounded) > 1e-9):
            raise DataError(f"n={n} does not realize the atom masses exactly")
        return np.repeat(self.locations, rounded.astype(int), axis=0)

    def cell_masses(self, edges: Sequence[np.ndarray]) -> np.ndarray:
        if self.jitter > 0:
            raise DataError("exact cell masses need jitter == 0")
        shape = tuple(len(e) - 1 for e in edges)
        out = np.zeros(shape)
        for loc, m in zip(self.locations, self.masses):
            cell = tuple(
                int(np.clip(np.searchsorted(e, x, side="right") - 1, 0, len(e) - 2))
                for e, x in zip(edges, loc)
            )
            out[cell] += m
        return out


def sample_trial(
    classes: Sequence,
    target_props,
    train_sizes,
    test_size: int,
    unobserved_last: bool = False,
    seed: int = 0,
) -> CpeTrial:
    """Draw a trial directly from synthetic class distributions.

    Same composition rules as :func:`make_cpe_trial`: exact largest-remainder
    test counts, training sample of class ``M`` omitted when
    ``unobserved_last``.
    """
    M = len(classes)
    props = _check_simplex(target_props)
    if len(props) != M:
        raise DataError(f"expected {M} target proportions, got {len(props)}")
    train_sizes = np.broadcast_to(np.asarray(train_sizes, dtype=int), (M,))
    counts = largest_remainder_counts(props, test_size)
    observed = list(range(1, M)) if unobserved_last else list(range(1, M + 1))
    rng = np.random.default_rng(seed)
    train = [classes[c - 1].sample(int(train_sizes[c - 1]), rng) for c in observed]
    test = np.vstack([cls.sample(int(k), rng) for cls, k in zip(classes, counts)])
    labels = np.repeat(np.arange(1, M + 1), counts)
    order = rng.permutation(test.shape[0])
    return CpeTrial(
        train,
        test[order],
        counts / test_size if test_size else props,
        tuple(observed),
        seed,
        labels[order],
    )
