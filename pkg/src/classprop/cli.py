"""Command line entry point: ``classprop <subcommand> --config cfg.yaml``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings

from classprop import harness
from classprop.classifier import ConvergenceWarning


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="classprop", description="Class proportion estimation benchmarks.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("run-cpe-benchmark", "all methods over the proportion grid, every class observed"),
        ("run-anomaly-benchmark", "same sweep with the last class hidden from training"),
        ("run-ci-coverage", "coverage of the per-class confidence intervals"),
        ("run-mcar", "excess risk of the grid ERM rule on a synthetic truth"),
        ("emit-roc", "smoothed ROC with bootstrap envelope for one pair of classes"),
    ]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="YAML or JSON experiment config")
        s.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        s.add_argument("--out", default=None, help="output directory (overrides the config)")
        s.add_argument("--jobs", type=int, default=None, help="worker processes")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", ConvergenceWarning)
    try:
        cfg = harness.load_config(args.config, seed=args.seed, out=args.out, jobs=args.jobs)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    failures = []
    try:
        if args.command == "run-cpe-benchmark":
            report = harness.run_cpe_benchmark(cfg)
            failures = report.failures
            summary = report.aggregates()["by_dataset"]
        elif args.command == "run-anomaly-benchmark":
            report = harness.run_anomaly_benchmark(cfg)
            failures = report.failures
            summary = report.extra["curves"]
        elif args.command == "run-ci-coverage":
            res = harness.run_ci_coverage(cfg)
            failures = res["failures"]
            summary = {"pooled": res["pooled"], "per_dataset": res["per_dataset"]}
        elif args.command == "run-mcar":
            res = harness.run_mcar(cfg)
            summary = {k: res[k] for k in ("bayes_risk", "median_excess_risk")}
        else:
            env, curve = harness.run_roc(cfg)
            summary = {"points": len(env.grid), "vertices": len(curve.alpha)}
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    print(json.dumps(summary, indent=2, default=harness._json_default))
    for f in failures:
        print(f"failure: {json.dumps({k: v for k, v in f.items() if k != 'traceback'})}", file=sys.stderr)
    return 0 if not failures else 1


if __name__ == "__main__":
    sys.exit(main())
