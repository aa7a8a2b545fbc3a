"""Experiment configs, the estimator x tolerance x replicate matrix, and result files."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .estimators import (EstimationAborted, EstimatorConfig, fixed_schedule, run_ml_sus, run_sus,
                         standard_mc)
from .models.brownian import BrownianModel
from .models.darcy import DarcyModel
from .models.toy import ToyModel
from .rng import derive_seed

CSV_HEADER = ["replicate", "estimator", "benchmark", "tol", "p_hat", "cov_hat", "total_cost", "seed"]
ESTIMATORS = ("mc", "sus", "sus-sr", "ml-sus-sr")
BENCHMARKS = ("toy", "brownian", "darcy")

MODEL_KEYS = {
    "toy": {"gamma", "q", "max_level", "barrier", "dim"},
    "brownian": {"kl_terms", "max_level", "barrier", "gamma", "q", "coarsest_level"},
    "darcy": {"max_index", "tau", "alpha", "y_crit", "gamma", "level_costs", "base_cells", "region",
              "error_constant"},
}
ESTIMATOR_KEYS = {"p0", "s", "n_min", "n_max", "n_chains", "max_chains", "eta", "first_subset", "p1_hint",
                  "n_per_subset", "check_subset_property", "seed_policy", "growth", "max_subsets",
                  "allocation", "first_p0"}
LEVEL_KEYS = {"bias_share", "finest", "ml_levels", "ml_coarse_level", "ml_repeat", "ml_min_subsets"}
SUS_KEYS = {"thresholds", "level"}
TOP_KEYS = {"benchmark", "estimators", "tolerances", "replicates", "seed", "model", "estimator", "levels", "sus",
            "reference_probability", "mc_mode", "output", "name", "workers", "empirical_cov"}

DEFAULTS = {
    "toy": {
        "model": {"gamma": 0.5, "q": 2.0, "barrier": -3.8, "max_level": 20},
        "levels": {"bias_share": 0.5, "ml_coarse_level": 1, "ml_repeat": 0, "ml_min_subsets": 1},
        "sus": {"thresholds": [2.5, 1.8, 1.0, 0.5, 0.0]},
        "estimator": {"s": 1, "first_subset": "mc"},
    },
    "brownian": {
        "model": {"kl_terms": 256, "barrier": -4.0, "max_level": 12},
        "levels": {"bias_share": 1.0, "ml_coarse_level": 4, "ml_repeat": 2, "ml_min_subsets": 8},
        "sus": {"thresholds": [2.54, 1.69, 1.03, 0.48, 0.0]},
        "estimator": {"s": 2},
        "empirical_cov": "spread",
    },
    "darcy": {
        "model": {},
        "levels": {"finest": 4, "ml_levels": [2, 2, 2, 3, 4]},
        "sus": {"thresholds": [0.24, 0.125, 0.05, 0.0], "level": 4},
        "estimator": {"s": 2, "allocation": "cost"},
    },
}


class ConfigError(ValueError):
    def __init__(self, errors):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass
class ExperimentConfig:
    benchmark: str
    estimators: list
    tolerances: list
    replicates: int = 1
    seed: int = 0
    model: dict = field(default_factory=dict)
    estimator: dict = field(default_factory=dict)
    levels: dict = field(default_factory=dict)
    sus: dict = field(default_factory=dict)
    reference_probability: float | None = None
    mc_mode: str = "projected"
    empirical_cov: str = "reference"
    output: dict = field(default_factory=dict)
    name: str = "experiment"
    workers: int = 1

    # -- derived quantities

    def build_model(self):
        kw = dict(self.model)
        if self.benchmark == "toy":
            return ToyModel(seed=self.seed, **kw)
        if self.benchmark == "brownian":
            return BrownianModel(**kw)
        if "region" in kw:
            kw["region"] = tuple(kw["region"])
        return DarcyModel(**kw)

    def finest_level(self, tol: float, gamma: float) -> int:
        if self.levels.get("finest") is not None:
            return int(self.levels["finest"])
        share = float(self.levels.get("bias_share", 1.0))
        return max(1, math.ceil(math.log(share * tol) / math.log(gamma) - 1e-9))

    def ml_levels(self, tol: float, gamma: float) -> list[int]:
        if self.levels.get("ml_levels") is not None:
            return [int(v) for v in self.levels["ml_levels"]]
        L = self.finest_level(tol, gamma)
        c = min(int(self.levels.get("ml_coarse_level", 1)), L)
        lv = [c] * int(self.levels.get("ml_repeat", 0)) + list(range(c, L + 1))
        pad = int(self.levels.get("ml_min_subsets", 1)) - len(lv)
        return [c] * max(pad, 0) + lv

    def sus_level(self, tol: float, gamma: float) -> int:
        if self.sus.get("level") is not None:
            return int(self.sus["level"])
        return self.finest_level(tol, gamma)

    def estimator_config(self, tol: float, selective: bool) -> EstimatorConfig:
        return EstimatorConfig(tol=tol, selective=selective, **self.estimator)


def _merge_defaults(raw: dict) -> dict:
    out = dict(raw)
    for section, values in DEFAULTS.get(raw.get("benchmark"), {}).items():
        if not isinstance(values, dict):
            out.setdefault(section, values)
            continue
        merged = dict(values)
        merged.update(raw.get(section) or {})
        out[section] = merged
    return out


def validate_config(raw) -> list[str]:
    """All problems with a raw config dict (empty list when valid)."""
    errors = []
    if not isinstance(raw, dict):
        return ["config must be a JSON object"]
    for k in sorted(set(raw) - TOP_KEYS):
        errors.append(f"unknown key {k!r}")
    bench = raw.get("benchmark")
    if bench is None:
        errors.append("missing benchmark")
    elif bench not in BENCHMARKS:
        errors.append(f"benchmark must be one of {BENCHMARKS}, got {bench!r}")
    est = raw.get("estimators")
    if not isinstance(est, list) or not est:
        errors.append("estimators must be a non-empty list")
    else:
        for e in est:
            if e not in ESTIMATORS:
                errors.append(f"unknown estimator {e!r}")
        if len(set(est)) != len(est):
            errors.append("duplicate estimators")
    tols = raw.get("tolerances")
    if not isinstance(tols, list) or not tols:
        errors.append("tolerances must be a non-empty list")
    elif not all(isinstance(t, (int, float)) and not isinstance(t, bool) and t > 0 for t in tols):
        errors.append("tolerances must be positive numbers")
    reps = raw.get("replicates", 1)
    if not isinstance(reps, int) or isinstance(reps, bool) or reps < 1:
        errors.append("replicates must be an integer >= 1")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append("seed must be a nonnegative integer")
    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
        errors.append("workers must be an integer >= 1")
    if raw.get("empirical_cov", "reference") not in ("reference", "spread"):
        errors.append("empirical_cov must be 'reference' or 'spread'")
    if raw.get("mc_mode", "projected") not in ("projected", "run"):
        errors.append("mc_mode must be 'projected' or 'run'")
    ref = raw.get("reference_probability")
    if ref is not None and not (isinstance(ref, (int, float)) and 0 < ref < 1):
        errors.append("reference_probability must lie in (0, 1)")
    for section, allowed in (("estimator", ESTIMATOR_KEYS), ("levels", LEVEL_KEYS), ("sus", SUS_KEYS),
                             ("model", MODEL_KEYS.get(bench, set())), ("output", {"dir"})):
        sub = raw.get(section, {})
        if not isinstance(sub, dict):
            errors.append(f"{section} must be an object")
            continue
        for k in sorted(set(sub) - allowed):
            errors.append(f"unknown key {section}.{k}")
    if errors:
        return errors
    cfg = _build(raw)
    try:
        model = cfg.build_model()
    except (TypeError, ValueError) as exc:
        return [f"model: {exc}"]
    gamma = model.schedule.gamma
    for tol in cfg.tolerances:
        try:
            cfg.estimator_config(tol, False)
        except ValueError as exc:
            errors.append(f"estimator: {exc}")
            break
        for lv in set(cfg.ml_levels(tol, gamma)) | {cfg.sus_level(tol, gamma), cfg.finest_level(tol, gamma)}:
            if not 1 <= lv <= model.max_level:
                errors.append(f"tol {tol}: level {lv} outside 1..{model.max_level}")
    if "mc" in cfg.estimators and cfg.reference_probability is None:
        errors.append("estimator 'mc' needs reference_probability")
    th = cfg.sus.get("thresholds")
    if any(e in cfg.estimators for e in ("sus", "sus-sr")) and th is not None:
        try:
            fixed_schedule(th, 1)
        except ValueError as exc:
            errors.append(f"sus.thresholds: {exc}")
    if "sus-sr" in cfg.estimators and th is None:
        errors.append("sus-sr needs fixed sus.thresholds")
    elif "sus-sr" in cfg.estimators and not errors:
        for tol in cfg.tolerances:
            bad = fixed_schedule(th, cfg.sus_level(tol, gamma)).spacing_violations(gamma)
            if bad:
                errors.append(f"tol {tol}: sus.thresholds gaps below 2 gamma**L at subsets {bad} (sus-sr)")
    return sorted(set(errors), key=errors.index)


def _build(raw: dict) -> ExperimentConfig:
    merged = _merge_defaults(raw)
    ref = merged.get("reference_probability")
    if ref is None and merged["benchmark"] == "toy":
        ref = float(norm.cdf(merged["model"]["barrier"]))
    if ref is None and merged["benchmark"] == "brownian":
        ref = BrownianModel.reference_probability(merged["model"].get("barrier", -4.0))
    return ExperimentConfig(
        benchmark=merged["benchmark"], estimators=list(merged["estimators"]),
        tolerances=[float(t) for t in merged["tolerances"]], replicates=int(merged.get("replicates", 1)),
        seed=int(merged.get("seed", 0)), model=merged.get("model", {}), estimator=merged.get("estimator", {}),
        levels=merged.get("levels", {}), sus=merged.get("sus", {}), reference_probability=ref,
        mc_mode=merged.get("mc_mode", "projected"), empirical_cov=merged.get("empirical_cov", "reference"),
        output=merged.get("output", {}),
        name=merged.get("name", "experiment"), workers=int(merged.get("workers", 1)))


def parse_config(source) -> ExperimentConfig:
    """Read a JSON config (path or dict), fill defaults, and validate; raises :class:`ConfigError`."""
    if isinstance(source, dict):
        raw = source
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"cannot read config: {exc}"]) from exc
    errors = validate_config(raw)
    if errors:
        raise ConfigError(errors)
    return _build(raw)


# -- running


@dataclass
class ReplicateRecord:
    replicate: int
    estimator: str
    benchmark: str
    tol: float
    p_hat: float
    cov_hat: float
    total_cost: float
    seed: int
    counts: dict = field(default_factory=dict)
    costs: dict = field(default_factory=dict)
    subsets: list = field(default_factory=list)
    violations: int = 0
    aborted: str | None = None
    projected: bool = False
    wall_time: float = 0.0

    def csv_row(self) -> list[str]:
        return [str(self.replicate), self.estimator, self.benchmark, repr(self.tol), repr(self.p_hat),
                repr(self.cov_hat), repr(self.total_cost), str(self.seed)]

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["counts"] = {str(k): v for k, v in sorted(self.counts.items())}
        d["costs"] = {str(k): v for k, v in sorted(self.costs.items())}
        return d


def replicate_seed(global_seed: int, replicate: int) -> int:
    return derive_seed(global_seed, replicate)


_MODEL_CACHE: dict = {}


def _model_for(cfg: ExperimentConfig):
    key = json.dumps([cfg.benchmark, cfg.model, cfg.seed], sort_keys=True)
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = cfg.build_model()
    return _MODEL_CACHE[key]


def run_replicate(cfg: ExperimentConfig, estimator: str, tol: float, replicate: int) -> ReplicateRecord:
    model = _model_for(cfg)
    gamma = model.schedule.gamma
    seed = replicate_seed(cfg.seed, replicate)
    rec = ReplicateRecord(replicate, estimator, cfg.benchmark, tol, math.nan, math.nan, 0.0, seed)
    t0 = time.perf_counter()
    if estimator == "mc":
        L = cfg.finest_level(tol, gamma)
        P = cfg.reference_probability
        n = math.ceil((1.0 - P) / (P * tol**2)) if cfg.mc_mode == "run" else tol**-2 / P
        if cfg.mc_mode == "projected":
            rec.p_hat, rec.cov_hat, rec.projected = P, tol, True
            rec.total_cost = n * model.level_cost(L)
            rec.counts, rec.costs = {L: n}, {L: rec.total_cost}
            return rec
        report = standard_mc(model, L, n, seed=seed, replicate_id=replicate)
    else:
        ecfg = cfg.estimator_config(tol, selective=estimator != "sus")
        try:
            if estimator == "ml-sus-sr":
                report = run_ml_sus(model, ecfg, levels=cfg.ml_levels(tol, gamma), seed=seed, replicate_id=replicate)
            else:
                level = cfg.sus_level(tol, gamma)
                th = cfg.sus.get("thresholds")
                schedule = fixed_schedule(th, level) if th is not None else None
                report = run_sus(model, ecfg, schedule, level=level, seed=seed, replicate_id=replicate)
        except EstimationAborted as exc:
            rec.aborted = str(exc)
            if exc.ledger is not None:
                rec.total_cost = exc.ledger.total_cost
                rec.counts, rec.costs = dict(exc.ledger.counts), dict(exc.ledger.costs)
            rec.wall_time = time.perf_counter() - t0
            return rec
    rec.p_hat, rec.cov_hat, rec.total_cost = report.p_hat, report.cov_hat, report.total_cost
    rec.counts, rec.costs = dict(report.ledger.counts), dict(report.ledger.costs)
    rec.subsets = [dict(s.__dict__) for s in report.subsets]
    rec.violations = report.violations
    rec.wall_time = time.perf_counter() - t0
    return rec


def _task(args):
    return run_replicate(*args)


def run_experiment(cfg: ExperimentConfig, workers: int | None = None, progress=None) -> list[ReplicateRecord]:
    """Every (estimator, tol, replicate) cell, sorted deterministically."""
    tasks = [(cfg, e, t, r) for e in cfg.estimators for t in cfg.tolerances for r in range(cfg.replicates)]
    workers = workers or cfg.workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_task, tasks, chunksize=max(1, len(tasks) // (8 * workers))))
    else:
        records = []
        for t in tasks:
            records.append(_task(t))
            if progress is not None:
                progress(records[-1])
    order = {e: i for i, e in enumerate(ESTIMATORS)}
    records.sort(key=lambda r: (order[r.estimator], r.tol, r.replicate))
    return records


# -- aggregation and output


def log_log_slope(tols, costs) -> float:
    x, y = np.log(np.asarray(tols, float)), np.log(np.asarray(costs, float))
    return float(np.polyfit(x, y, 1)[0])


def summarize_records(records, reference: float | None = None, empirical_cov: str = "reference") -> dict:
    """Per (estimator, tol) statistics.

    ``emp_cov`` is the relative RMSE against ``reference`` when one is given
    and ``empirical_cov == "reference"``, else the relative standard
    deviation of the replicates.
    """
    groups: dict = {}
    for r in records:
        groups.setdefault((r.estimator, r.tol), []).append(r)
    rows = []
    for (est, tol), recs in groups.items():
        ok = [r for r in recs if r.aborted is None and np.isfinite(r.p_hat)]
        p = np.array([r.p_hat for r in ok])
        entry = {"estimator": est, "tol": tol, "replicates": len(recs), "aborted": len(recs) - len(ok),
                 "projected": any(r.projected for r in recs),
                 "mean_total_cost": float(np.mean([r.total_cost for r in recs]))}
        if p.size:
            mean = float(p.mean())
            sd = float(p.std(ddof=1)) if p.size > 1 else 0.0
            entry.update(mean_p_hat=mean, std_p_hat=sd, std_error=sd / math.sqrt(p.size),
                         rel_spread=sd / mean if mean > 0 else math.inf,
                         mean_cov_hat=float(np.mean([r.cov_hat for r in ok])))
            if reference is not None:
                entry["rel_rmse"] = float(np.sqrt(np.mean((p / reference - 1.0) ** 2)))
                entry["z_score"] = (mean - reference) / entry["std_error"] if sd > 0 else 0.0
            use_ref = reference is not None and empirical_cov == "reference"
            entry["emp_cov"] = entry["rel_rmse"] if use_ref else entry["rel_spread"]
        levels = sorted({k for r in recs for k in r.counts})
        entry["mean_counts"] = {str(k): float(np.mean([r.counts.get(k, 0) for r in recs])) for k in levels}
        entry["mean_costs"] = {str(k): float(np.mean([r.costs.get(k, 0.0) for r in recs])) for k in levels}
        n_sub = max((len(r.subsets) for r in ok), default=0)
        per = []
        for j in range(n_sub):
            rs = [r.subsets[j] for r in ok if len(r.subsets) > j]
            acc = [s["acceptance"] for s in rs if not math.isnan(s["acceptance"])]
            per.append({"subset": j + 1, "level": rs[0]["level"], "threshold": float(np.mean([s["threshold"] for s in rs])),
                        "mean_p": float(np.mean([s["p_hat"] for s in rs])), "mean_n": float(np.mean([s["n"] for s in rs])),
                        "mean_acceptance": float(np.mean(acc)) if acc else None,
                        "mean_phi": float(np.mean([s["phi"] for s in rs]))})
        entry["subsets"] = per
        entry["violations"] = int(sum(r.violations for r in recs))
        entry["mean_wall_time"] = float(np.mean([r.wall_time for r in recs]))
        rows.append(entry)
    slopes = {}
    for est in {r["estimator"] for r in rows}:
        pts = sorted((r["tol"], r["mean_total_cost"]) for r in rows if r["estimator"] == est)
        if len(pts) >= 2:
            slopes[est] = log_log_slope(*zip(*pts))
    return {"reference_probability": reference, "empirical_cov": empirical_cov, "cells": rows,
            "cost_slopes": slopes}


def csv_text(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.csv_row())
    return buf.getvalue()


def emit_results(records, summary: dict, out_dir, name: str = "experiment") -> dict:
    """Write ``<name>_raw.csv``, ``<name>_records.jsonl`` and ``<name>_summary.json``."""
    if not records:
        raise ValueError("nothing to write")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / f"{name}_raw.csv", "records": out / f"{name}_records.jsonl",
             "summary": out / f"{name}_summary.json"}
    paths["csv"].write_text(csv_text(records))
    with paths["records"].open("w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), default=float) + "\n")
    paths["summary"].write_text(json.dumps(summary, indent=2, default=float))
    return paths


def read_raw_csv(path) -> list[ReplicateRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        recs = []
        for row in reader:
            rep, est, bench, tol, p, cov, cost, seed = row
            recs.append(ReplicateRecord(int(rep), est, bench, float(tol), float(p), float(cov), float(cost),
                                        int(seed)))
    return recs
