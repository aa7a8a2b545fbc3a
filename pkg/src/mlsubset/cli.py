"""Command line: ``run``, ``validate`` and ``summarize``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .experiment import (ConfigError, emit_results, parse_config, read_raw_csv, run_experiment,
                         summarize_records)

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlsubset", description="Rare-event estimation experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment matrix")
    run.add_argument("config")
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out", default=None, help="output directory")
    run.add_argument("--quiet", action="store_true")
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    summ = sub.add_parser("summarize", help="aggregate a raw CSV")
    summ.add_argument("raw_csv")
    summ.add_argument("--reference", type=float, default=None)
    summ.add_argument("--empirical-cov", choices=("reference", "spread"), default="reference")
    summ.add_argument("--out", default=None, help="write the summary JSON here instead of stdout")
    return p


def _run(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_INVALID
    if args.seed is not None:
        if args.seed < 0:
            print("config error: seed must be nonnegative", file=sys.stderr)
            return EXIT_INVALID
        cfg = replace(cfg, seed=args.seed)
    if args.workers is not None and args.workers < 1:
        print("config error: workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID

    def progress(rec):
        if not args.quiet:
            status = "aborted" if rec.aborted else f"p={rec.p_hat:.4g} cost={rec.total_cost:.4g}"
            print(f"{rec.estimator} tol={rec.tol:g} rep={rec.replicate}: {status}", file=sys.stderr)

    try:
        records = run_experiment(cfg, workers=args.workers, progress=progress)
        summary = summarize_records(records, cfg.reference_probability, cfg.empirical_cov)
        summary["config"] = {"name": cfg.name, "benchmark": cfg.benchmark, "seed": cfg.seed,
                             "replicates": cfg.replicates}
        model = cfg.build_model()
        if hasattr(model, "truncation_report"):
            summary["truncation"] = model.truncation_report()
        out = args.out or cfg.output.get("dir", "results")
        paths = emit_results(records, summary, out, cfg.name)
    except Exception as exc:  # noqa: BLE001 - any failure here is a runtime abort
        print(f"runtime abort: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORT
    for cell in summary["cells"]:
        mean = cell.get("mean_p_hat", float("nan"))
        print(f"{cell['estimator']:>10} tol={cell['tol']:<6g} mean_p={mean:.4g} "
              f"emp_cov={cell.get('emp_cov', float('nan')):.3g} cost={cell['mean_total_cost']:.4g} "
              f"aborted={cell['aborted']} violations={cell['violations']}")
    for k, v in sorted(summary["cost_slopes"].items()):
        print(f"cost-vs-tol slope {k}: {v:.3f}")
    print(f"wrote {paths['csv']}")
    return EXIT_OK


def _validate(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_INVALID
    print(f"ok: {cfg.benchmark}, estimators {cfg.estimators}, tolerances {cfg.tolerances}, "
          f"{cfg.replicates} replicates")
    return EXIT_OK


def _summarize(args) -> int:
    try:
        records = read_raw_csv(args.raw_csv)
    except (OSError, ValueError) as exc:
        print(f"cannot read {args.raw_csv}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    summary = summarize_records(records, args.reference, args.empirical_cov)
    text = json.dumps(summary, indent=2, default=float)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    return {"run": _run, "validate": _validate, "summarize": _summarize}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
