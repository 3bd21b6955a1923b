"""Benchmark orchestration: proportion sweeps, l1 scoring, CI coverage, MCAR runs.

Configs are YAML (or JSON) mappings. A dataset entry is either a file::

    {name: australian, path: data/australian.csv, format: csv}

or a synthetic specification, one entry per class::

    {name: gauss, synthetic: {classes: [{mean: [0, 0], std: 1},
                                        {mean: [3, 0], std: 1},
                                        {atoms: [0, 1, 2], masses: [.2, .3, .5], jitter: 0.1}]}}

Every (dataset, permutation, proportion) cell draws its trial from its own
random stream derived from the master seed, so results do not depend on
execution order or on the number of worker processes.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from classprop import cpe, mcar
from classprop.dataio import (
    Dataset,
    DiscreteClass,
    GaussianMixtureClass,
    load_csv,
    load_sparse,
    make_cpe_trial,
    sample_trial,
)
from classprop.mpe import MpeConfig

logger = logging.getLogger(__name__)

DEFAULT_GRID = (0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99)


class ConfigError(ValueError):
    pass


def l1_error(est, truth) -> float:
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {truth.shape}")
    return float(np.abs(est - truth).sum())


# ---------------------------------------------------------------------------
# configuration


def _class_from_spec(spec):
    if "atoms" in spec:
        return DiscreteClass(np.asarray(spec["atoms"], dtype=float), spec["masses"], float(spec.get("jitter", 0.0)))
    if "components" in spec:
        comps = spec["components"]
        return GaussianMixtureClass(
            tuple(c["weight"] for c in comps),
            tuple(np.atleast_1d(c["mean"]) for c in comps),
            tuple(np.broadcast_to(c.get("std", 1.0), np.shape(np.atleast_1d(c["mean"]))) for c in comps),
        )
    if "mean" in spec:
        mean = np.atleast_1d(np.asarray(spec["mean"], dtype=float))
        std = np.broadcast_to(np.asarray(spec.get("std", 1.0), dtype=float), mean.shape)
        return GaussianMixtureClass((1.0,), (mean,), (std,))
    raise ConfigError(f"cannot build a class distribution from {spec!r}")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    path: str | None = None
    format: str | None = None
    classes: tuple = ()
    base_weights: tuple | None = None
    anomaly_class: str = "auto"

    @classmethod
    def from_dict(cls, d, root: Path | None = None) -> "DatasetSpec":
        if "name" not in d:
            raise ConfigError("every dataset needs a name")
        if "synthetic" in d:
            syn = d["synthetic"]
            classes = tuple(_class_from_spec(c) for c in syn["classes"])
            if len(classes) < 2:
                raise ConfigError(f"dataset {d['name']}: need at least two classes")
            weights = syn.get("base_weights")
            return cls(d["name"], classes=classes, base_weights=tuple(weights) if weights else None)
        if "path" not in d:
            raise ConfigError(f"dataset {d['name']}: give either 'path' or 'synthetic'")
        path = Path(d["path"])
        if root is not None and not path.is_absolute():
            path = root / path
        fmt = d.get("format") or ("csv" if path.suffix.lower() == ".csv" else "sparse")
        if fmt not in ("csv", "sparse"):
            raise ConfigError(f"dataset {d['name']}: unknown format {fmt!r}")
        return cls(d["name"], str(path), fmt, anomaly_class=d.get("anomaly_class", "auto"))

    @property
    def synthetic(self) -> bool:
        return bool(self.classes)

    def load(self) -> Dataset:
        data = load_csv(self.path) if self.format == "csv" else load_sparse(self.path)
        return reorder_classes(data, self.anomaly_class)


def reorder_classes(d: Dataset, rule: str = "auto") -> Dataset:
    """Relabel so that the class playing the role of class M comes last.

    ``auto``: the largest class for multiclass data, the existing last label
    for binary data. ``largest`` / ``last`` force either rule.
    """
    if rule not in ("auto", "largest", "last"):
        raise ConfigError(f"unknown anomaly_class rule {rule!r}")
    if rule == "last" or (rule == "auto" and d.class_count == 2):
        return d
    counts = d.class_counts()
    big = int(np.argmax(counts)) + 1
    if big == d.class_count:
        return d
    labels = d.labels.copy()
    labels[d.labels == big] = d.class_count
    labels[d.labels == d.class_count] = big
    return Dataset(d.features, labels, d.class_count)


@dataclass(frozen=True)
class BenchmarkConfig:
    datasets: tuple
    methods: tuple = ("mpe_incomplete", "mpe_projected", "mpe_joint", "em", "l2", "baseline")
    proportions: tuple = DEFAULT_GRID
    permutations: int = 10
    train_size: int = 300
    test_size: int = 300
    seed: int = 0
    jobs: int = 1
    out: str | None = None
    level: float = 0.95
    score_raw_incomplete: bool = False
    cpe: cpe.CpeConfig = field(default_factory=cpe.CpeConfig)
    mcar: dict = field(default_factory=dict)
    roc: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.permutations < 1:
            raise ConfigError("permutations must be >= 1")
        for p in self.proportions:
            if not 0.0 < p < 1.0:
                raise ConfigError(f"proportion {p} is not in (0, 1)")
        for m in self.methods:
            if m not in cpe.METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {sorted(cpe.METHODS)}")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("level must lie in (0, 1)")


def _dataclass_overrides(dc, overrides: dict, what: str):
    known = {f.name for f in fields(dc)}
    bad = set(overrides) - known
    if bad:
        raise ConfigError(f"unknown {what} keys: {sorted(bad)}")
    return replace(dc, **overrides)


def load_config(path_or_dict, seed: int | None = None, out=None, jobs: int | None = None) -> BenchmarkConfig:
    """Parse a YAML/JSON file (or an already-loaded mapping) into a :class:`BenchmarkConfig`."""
    if isinstance(path_or_dict, dict):
        raw, root = dict(path_or_dict), None
    else:
        path = Path(path_or_dict)
        raw = yaml.safe_load(path.read_text()) or {}
        root = path.parent
    if not isinstance(raw, dict):
        raise ConfigError("config must be a key/value mapping")
    raw = dict(raw)
    datasets = tuple(DatasetSpec.from_dict(d, root) for d in raw.pop("datasets", []))
    mpe_cfg = _dataclass_overrides(MpeConfig(), raw.pop("mpe", {}) or {}, "mpe")
    cpe_cfg = _dataclass_overrides(cpe.CpeConfig(mpe=mpe_cfg), raw.pop("cpe", {}) or {}, "cpe")
    if "proportions" in raw:
        raw["proportions"] = tuple(float(p) for p in raw["proportions"])
    if "methods" in raw:
        raw["methods"] = tuple(raw["methods"])
    known = {f.name for f in fields(BenchmarkConfig)} - {"datasets", "cpe"}
    bad = set(raw) - known
    if bad:
        raise ConfigError(f"unknown config keys: {sorted(bad)}")
    cfg = BenchmarkConfig(datasets=datasets, cpe=cpe_cfg, **raw)
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    if out is not None:
        cfg = replace(cfg, out=str(out))
    if jobs is not None:
        cfg = replace(cfg, jobs=int(jobs))
    return cfg


# ---------------------------------------------------------------------------
# trials


def cell_seed(master: int, dataset_id: int, permutation: int, prop_index: int) -> int:
    return int(np.random.SeedSequence([master, dataset_id, permutation, prop_index]).generate_state(1)[0])


def target_proportions(p: float, M: int, base_weights=None) -> np.ndarray:
    """Class M gets ``p``; the others share ``1 - p`` in proportion to ``base_weights``."""
    w = np.ones(M - 1) if base_weights is None else np.asarray(base_weights, dtype=float)[: M - 1]
    w = w / w.sum()
    return np.append((1.0 - p) * w, p)


def build_trial(spec: DatasetSpec, data, p: float, cfg: BenchmarkConfig, unobserved: bool, seed: int):
    if spec.synthetic:
        M = len(spec.classes)
        props = target_proportions(p, M, spec.base_weights)
        return sample_trial(spec.classes, props, cfg.train_size, cfg.test_size, unobserved, seed)
    M = data.class_count
    counts = data.class_counts()
    props = target_proportions(p, M, counts[:-1])
    return make_cpe_trial(data, props, cfg.train_size, cfg.test_size, unobserved, seed)


# ---------------------------------------------------------------------------
# reports


@dataclass
class BenchmarkReport:
    kind: str
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def aggregates(self) -> dict:
        return {
            "by_dataset": _aggregate(self.rows, ("dataset", "method")),
            "by_proportion": _aggregate(self.rows, ("method", "proportion")),
        }

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "rows": self.rows,
            "failures": self.failures,
            "aggregates": self.aggregates(),
            **self.extra,
        }

    def comparable_rows(self) -> list:
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.rows]


def _aggregate(rows, keys) -> list:
    """Mean and population standard deviation of l1 per group."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r["l1"])
    out = []
    for key in sorted(groups, key=lambda t: tuple(str(x) if isinstance(x, str) else x for x in t)):
        vals = np.array(groups[key])
        item = dict(zip(keys, key))
        item.update(mean_l1=float(vals.mean()), std_l1=float(vals.std()), count=int(vals.size))
        out.append(item)
    return out


def _run_cell(task):
    """Build one trial and run every method on it; returns (rows, failures)."""
    ds_id, spec, data, perm, pi_idx, p, cfg, unobserved = task
    seed = cell_seed(cfg.seed, ds_id, perm, pi_idx)
    base = {"dataset": spec.name, "proportion": float(p), "permutation": int(perm)}
    rows, failures = [], []
    try:
        trial = build_trial(spec, data, p, cfg, unobserved, seed)
    except Exception as exc:
        for m in cfg.methods:
            failures.append({**base, "method": m, "error": f"{type(exc).__name__}: {exc}"})
        return rows, failures
    ctx = cpe.TrialContext(trial, replace(cfg.cpe, seed=seed))
    truth = trial.true_proportions
    for m in cfg.methods:
        start = time.perf_counter()
        try:
            est = cpe.estimate(m, trial, ctx.cfg, ctx)
            raw = cfg.score_raw_incomplete and m == "mpe_incomplete"
            values = est.scored_values(raw)
            rows.append(
                {
                    **base,
                    "method": m,
                    "l1": l1_error(values, truth),
                    "estimate": [float(v) for v in values],
                    "truth": [float(v) for v in truth],
                    "zero_padded": bool(est.flags.get("zero_padded", False)),
                    "wall_time": time.perf_counter() - start,
                }
            )
        except Exception as exc:
            logger.debug("cell failure", exc_info=True)
            failures.append({**base, "method": m, "error": f"{type(exc).__name__}: {exc}",
                             "traceback": traceback.format_exc(limit=3)})
    return rows, failures


def _load_all(cfg):
    loaded = []
    for spec in cfg.datasets:
        try:
            loaded.append((spec, None if spec.synthetic else spec.load(), None))
        except Exception as exc:
            loaded.append((spec, None, f"{type(exc).__name__}: {exc}"))
    return loaded


def _sweep(cfg: BenchmarkConfig, kind: str, unobserved: bool) -> BenchmarkReport:
    if not cfg.datasets:
        raise ConfigError("no datasets configured")
    report = BenchmarkReport(kind)
    tasks = []
    for ds_id, (spec, data, err) in enumerate(_load_all(cfg)):
        if err:
            report.failures.append({"dataset": spec.name, "error": err})
            continue
        for perm in range(cfg.permutations):
            for pi_idx, p in enumerate(cfg.proportions):
                tasks.append((ds_id, spec, data, perm, pi_idx, p, cfg, unobserved))
    for rows, failures in _map(_run_cell, tasks, cfg.jobs):
        report.rows.extend(rows)
        report.failures.extend(failures)
    return report


def _map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        # map preserves task order regardless of completion order
        return list(pool.map(fn, tasks))


def run_cpe_benchmark(cfg: BenchmarkConfig) -> BenchmarkReport:
    """Fully observed sweep: every method on every (dataset, permutation, proportion) cell."""
    report = _sweep(cfg, "cpe", unobserved=False)
    _write(report, cfg)
    return report


def run_anomaly_benchmark(cfg: BenchmarkConfig) -> BenchmarkReport:
    """Class M hidden from every method; comparators report 0 for it."""
    for spec in cfg.datasets:
        if spec.synthetic and len(spec.classes) < 3:
            raise ConfigError(f"dataset {spec.name}: the anomaly setting needs M >= 3")
    report = _sweep(cfg, "anomaly", unobserved=True)
    report.extra["curves"] = _aggregate(report.rows, ("method", "proportion"))
    _write(report, cfg)
    return report


def _ci_cell(task):
    ds_id, spec, data, perm, pi_idx, p, cfg, _ = task
    seed = cell_seed(cfg.seed, ds_id, perm, pi_idx)
    base = {"dataset": spec.name, "proportion": float(p), "permutation": int(perm)}
    try:
        trial = build_trial(spec, data, p, cfg, False, seed)
        ctx = cpe.TrialContext(trial, replace(cfg.cpe, seed=seed))
        point = cpe.estimate_incomplete(trial, ctx.cfg, ctx).values
        ci = cpe.confidence_intervals(trial, cfg.level, ctx.cfg, ctx)
    except Exception as exc:
        return [], [{**base, "error": f"{type(exc).__name__}: {exc}"}]
    rows = []
    for c, ((lo, hi), truth) in enumerate(zip(ci, trial.true_proportions), start=1):
        rows.append(
            {**base, "class": c, "truth": float(truth), "estimate": float(point[c - 1]),
             "lower": float(lo), "upper": float(hi), "covered": bool(lo <= truth <= hi)}
        )
    return rows, []


def run_ci_coverage(cfg: BenchmarkConfig) -> dict:
    """Fraction of (trial, class) pairs whose true proportion lies inside the interval."""
    if not cfg.datasets:
        raise ConfigError("no datasets configured")
    rows, failures, tasks = [], [], []
    for ds_id, (spec, data, err) in enumerate(_load_all(cfg)):
        if err:
            failures.append({"dataset": spec.name, "error": err})
            continue
        for perm in range(cfg.permutations):
            for pi_idx, p in enumerate(cfg.proportions):
                tasks.append((ds_id, spec, data, perm, pi_idx, p, cfg, False))
    for r, f in _map(_ci_cell, tasks, cfg.jobs):
        rows.extend(r)
        failures.extend(f)
    if not rows:
        raise ValueError("empty experiment: no (trial, class) pairs to score")
    per_dataset = {}
    for name in sorted({r["dataset"] for r in rows}):
        sel = [r["covered"] for r in rows if r["dataset"] == name]
        per_dataset[name] = float(np.mean(sel))
    result = {
        "kind": "ci_coverage",
        "level": cfg.level,
        "pooled": float(np.mean([r["covered"] for r in rows])),
        "per_dataset": per_dataset,
        "rows": rows,
        "failures": failures,
    }
    _write_json(result, cfg, "ci_coverage.json")
    return result


# ---------------------------------------------------------------------------
# MCAR and ROC runs


def run_mcar(cfg: BenchmarkConfig) -> dict:
    """Consistency run of the grid ERM rule on a synthetic truth.

    ``cfg.mcar`` keys: ``classes`` (class specs, last one unobserved),
    ``priors``, ``sizes``, ``seeds`` (count), ``k`` (constant grid size;
    default schedule ``ceil(n^(1/(d+2)))``), ``pi_source``
    (``mpe_incomplete`` or ``exact``), ``n_mc``.
    """
    m = dict(cfg.mcar)
    if "classes" not in m:
        raise ConfigError("mcar section needs 'classes'")
    classes = [_class_from_spec(c) for c in m["classes"]]
    priors = m.get("priors") or [1.0 / len(classes)] * len(classes)
    truth = mcar.SyntheticTruth(classes, priors)
    k0 = m.get("k")
    schedule = (lambda n, d: int(k0)) if k0 else mcar.default_schedule
    source = m.get("pi_source", "mpe_incomplete")
    if source == "exact":
        pi_source = mcar.exact_pi
    elif source == "mpe_incomplete":
        cpe_cfg = cfg.cpe

        def pi_source(truth, trial):
            return cpe.estimate_incomplete(trial, replace(cpe_cfg, seed=trial.seed)).values
    else:
        raise ConfigError(f"unknown pi_source {source!r}")
    report = mcar.evaluate_rule(
        truth,
        [int(n) for n in m.get("sizes", (500, 2000, 20000))],
        schedule,
        range(int(m.get("seeds", 5))),
        pi_source,
        int(m.get("n_mc", 1_000_000)),
        cfg.seed,
    )
    result = {"kind": "mcar", **report.to_dict()}
    _write_json(result, cfg, "mcar.json")
    return result


def run_roc(cfg: BenchmarkConfig):
    """Smoothed ROC (with envelope) of one class against another.

    ``cfg.roc`` keys: ``dataset`` (name, default the first), ``alt_class``,
    ``null_class`` (1-based, default 1 and 2), ``size`` (rows per class for
    synthetic data), ``level``. Returns the envelope and the empirical curve.
    """
    from classprop import classifier as klr
    from classprop.mpe import _scores, select_for_pair
    from classprop.roc import bootstrap_envelope, empirical_roc

    r = dict(cfg.roc)
    name = r.get("dataset", cfg.datasets[0].name if cfg.datasets else None)
    spec = next((s for s in cfg.datasets if s.name == name), None)
    if spec is None:
        raise ConfigError(f"unknown dataset {name!r}")
    alt, null = int(r.get("alt_class", 1)), int(r.get("null_class", 2))
    rng = np.random.default_rng(cfg.seed)
    if spec.synthetic:
        size = int(r.get("size", cfg.train_size))
        F = spec.classes[alt - 1].sample(size, rng)
        H = spec.classes[null - 1].sample(size, rng)
    else:
        data = spec.load()
        F, H = data.by_class(alt), data.by_class(null)
    X = np.vstack([F, H])
    y = np.r_[np.ones(len(F)), np.zeros(len(H))]
    m = cfg.cpe.mpe.with_seed(cfg.seed)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", klr.ConvergenceWarning)
        sigma, lam = select_for_pair(X, y, m)
        s = _scores(X, y, sigma, lam, m)
    env = bootstrap_envelope(s[: len(F)], s[len(F):], m.bootstrap, m.grid_size, float(r.get("level", cfg.level)), cfg.seed)
    curve = empirical_roc(s[: len(F)], s[len(F):])
    if cfg.out:
        emit_plot_data(env, "roc", cfg.out)
        _write_csv(Path(cfg.out) / "roc_empirical.csv", ["alpha", "p"], zip(curve.alpha, curve.p))
    return env, curve


# ---------------------------------------------------------------------------
# output


def _write_json(obj, cfg, name):
    if not cfg.out:
        return
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _write(report: BenchmarkReport, cfg: BenchmarkConfig):
    if not cfg.out:
        return
    _write_json(report.to_dict(), cfg, f"{report.kind}_report.json")
    emit_plot_data(report, "proportion-curve", cfg.out)
    emit_plot_data(report, "dataset-table", cfg.out)


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def emit_plot_data(report, kind: str, out_dir) -> list:
    """Write CSV plot data and return the paths written.

    ``proportion-curve``: ``proportion,method,mean_l1,std_l1``;
    ``dataset-table``: ``dataset,method,mean_l1,std_l1,count``;
    ``roc`` (``report`` is a ROC envelope): ``alpha,p,lower,upper``.
    """
    out = Path(out_dir)
    if kind == "proportion-curve":
        prefix = getattr(report, "kind", "cpe")
        agg = report.aggregates()["by_proportion"]
        path = out / f"{prefix}_proportion_curve.csv"
        _write_csv(path, ["proportion", "method", "mean_l1", "std_l1"],
                   ((a["proportion"], a["method"], a["mean_l1"], a["std_l1"]) for a in agg))
        return [path]
    if kind == "dataset-table":
        prefix = getattr(report, "kind", "cpe")
        agg = report.aggregates()["by_dataset"]
        path = out / f"{prefix}_dataset_table.csv"
        _write_csv(path, ["dataset", "method", "mean_l1", "std_l1", "count"],
                   ((a["dataset"], a["method"], a["mean_l1"], a["std_l1"], a["count"]) for a in agg))
        return [path]
    if kind == "roc":
        path = out / "roc.csv"
        _write_csv(path, ["alpha", "p", "lower", "upper"],
                   zip(report.grid, report.mean_curve, report.lower, report.upper))
        return [path]
    raise ValueError(f"unknown plot kind {kind!r}")
