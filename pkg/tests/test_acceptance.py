"""End-to-end acceptance checks with pinned seeds and tolerances.

Each test prints one PASS/FAIL line; the lines are repeated in the pytest
terminal summary.  The full module takes about half an hour on one core.
"""
import json
import math

import numpy as np
import pytest
from scipy import stats

from mlsubset import cli
from mlsubset.experiment import parse_config, run_experiment, summarize_records
from mlsubset.hierarchy import EvaluationCache
from mlsubset.models.darcy import DarcyModel
from mlsubset.models.fem import DarcySolver, UniformMesh
from mlsubset.models.toy import ToyModel
from mlsubset.shaking import ShakingConfig, SubsetSpec, run_chain

pytestmark = pytest.mark.slow

P_TOY = stats.norm.cdf(-3.8)
TOY_TOLS = [0.4, 0.2, 0.1, 0.05]


def _cells(records, cfg):
    summary = summarize_records(records, cfg.reference_probability, cfg.empirical_cov)
    return {(c["estimator"], c["tol"]): c for c in summary["cells"]}, summary


@pytest.fixture(scope="module")
def toy_run():
    cfg = parse_config({"benchmark": "toy", "estimators": ["mc", "sus", "sus-sr", "ml-sus-sr"],
                        "tolerances": TOY_TOLS, "replicates": 100, "seed": 2024})
    recs = run_experiment(cfg)
    return cfg, recs, *_cells(recs, cfg)


@pytest.fixture(scope="module")
def brownian_run():
    cfg = parse_config({"benchmark": "brownian", "estimators": ["ml-sus-sr"], "tolerances": [0.1],
                        "replicates": 100, "seed": 2024})
    recs = run_experiment(cfg)
    return cfg, recs, *_cells(recs, cfg)


@pytest.fixture(scope="module")
def darcy_run():
    ml = parse_config({"benchmark": "darcy", "estimators": ["ml-sus-sr"], "tolerances": [0.25],
                       "replicates": 20, "seed": 7})
    sus = parse_config({"benchmark": "darcy", "estimators": ["sus"], "tolerances": [0.5],
                        "replicates": 20, "seed": 8})
    ml_recs, sus_recs = run_experiment(ml), run_experiment(sus)
    return ml_recs, sus_recs, _cells(ml_recs, ml)[0][("ml-sus-sr", 0.25)], _cells(sus_recs, sus)[0][("sus", 0.5)]


def test_1_toy_unbiased_and_accurate(toy_run, verdict):
    cfg, recs, cells, _ = toy_run
    parts, ok = [], True
    for est in ("sus", "sus-sr", "ml-sus-sr"):
        p = np.array([r.p_hat for r in recs if r.estimator == est and r.tol == 0.1])
        se = p.std(ddof=1) / math.sqrt(p.size)
        z = abs(p.mean() - P_TOY) / se
        delta = cells[(est, 0.1)]["emp_cov"]
        good = z <= 3.0 and delta <= 0.12
        ok &= good
        parts.append(f"{est}: mean={p.mean():.4e} z={z:.2f} emp_cov={delta:.3f}")
    assert verdict("1", ok, "; ".join(parts))


def test_2_toy_cost_rates_and_ordering(toy_run, verdict):
    _, _, cells, summary = toy_run
    slopes = summary["cost_slopes"]
    mc, ml = slopes["mc"], slopes["ml-sus-sr"]
    cost = {e: cells[(e, 0.1)]["mean_total_cost"] for e in ("mc", "sus", "sus-sr", "ml-sus-sr")}
    order = cost["ml-sus-sr"] < cost["sus-sr"] < cost["sus"] < cost["mc"]
    ok = abs(mc + 4) <= 0.6 and abs(ml + 2) <= 0.6 and order
    detail = (f"slope mc={mc:.2f} ml={ml:.2f}; cost@0.1 ml={cost['ml-sus-sr']:.3g} "
              f"sus-sr={cost['sus-sr']:.3g} sus={cost['sus']:.3g} mc={cost['mc']:.3g}")
    assert verdict("2", ok, detail)


def test_3_brownian(brownian_run, verdict):
    cfg, recs, cells, _ = brownian_run
    assert cfg.ml_levels(0.1, 2**-0.5) == [4, 4, 4, 4, 4, 5, 6, 7]
    c = cells[("ml-sus-sr", 0.1)]
    ok = 4e-5 <= c["mean_p_hat"] <= 8e-5 and c["emp_cov"] <= 0.10 and c["aborted"] == 0
    assert verdict("3", ok, f"mean={c['mean_p_hat']:.4e} emp_cov={c['emp_cov']:.3f} aborted={c['aborted']}")


def test_4a_darcy_probability(darcy_run, verdict):
    _, _, ml, _ = darcy_run
    ok = 0.9e-4 <= ml["mean_p_hat"] <= 3.6e-4 and ml["aborted"] == 0
    assert verdict("4a", ok, f"mean={ml['mean_p_hat']:.4e} (band [0.9e-4, 3.6e-4]) emp_cov={ml['emp_cov']:.3f}")


def test_4b_darcy_work_on_coarse_meshes(darcy_run, verdict):
    ml_recs, _, _, _ = darcy_run
    counts = {}
    for r in ml_recs:
        for lv, n in r.counts.items():
            counts[int(lv)] = counts.get(int(lv), 0) + n
    share = (counts.get(1, 0) + counts.get(2, 0)) / sum(counts.values())
    assert verdict("4b", share >= 0.95, f"share of solves on mesh levels 1-2 = {share:.4f} {dict(sorted(counts.items()))}")


def test_4c_darcy_saving_over_single_level(darcy_run, verdict):
    _, _, ml, sus = darcy_run
    # work rescaled to a common accuracy: cost * emp_cov**2 is tolerance-invariant for both
    ml_work = ml["mean_total_cost"] * ml["emp_cov"] ** 2
    sus_work = sus["mean_total_cost"] * sus["emp_cov"] ** 2
    ratio = sus_work / ml_work
    detail = (f"sus cost={sus['mean_total_cost']:.3g} emp_cov={sus['emp_cov']:.3f}; ml cost={ml['mean_total_cost']:.3g} "
              f"emp_cov={ml['emp_cov']:.3f}; normalised saving factor={ratio:.1f}")
    assert verdict("4c", ratio >= 20.0, detail)


def test_5_no_subset_violations(toy_run, brownian_run, darcy_run, verdict):
    recs = list(toy_run[1]) + list(brownian_run[1]) + list(darcy_run[0]) + list(darcy_run[1])
    total = sum(r.violations for r in recs)
    assert verdict("5", total == 0, f"violations={total} over {len(recs)} replicates")


def test_6_shaking_stationarity(verdict):
    d, n = 10, 100_000
    model = ToyModel(dim=d)
    start = np.random.default_rng(0).standard_normal(d)
    whole = SubsetSpec(math.inf, 1)
    rec = run_chain(start, n, whole, whole, ShakingConfig(eta=0.6, rng_seed=6), model)
    x = rec.states
    mean_err = float(np.max(np.abs(x.mean(axis=0))))
    var_err = float(np.max(np.abs(x.var(axis=0) - 1.0)))
    thinned = x[::50, 0]
    ks = stats.kstest(thinned, "norm")
    ok = mean_err <= 0.02 and var_err <= 0.05 and ks.pvalue >= 0.01 and rec.accepted == n - 1
    detail = f"max |mean|={mean_err:.4f} max |var-1|={var_err:.4f} ks_p={ks.pvalue:.3f} n_thinned={thinned.size}"
    assert verdict("6", ok, detail)


def test_7_selective_refinement_oracle(verdict):
    model = ToyModel(gamma=0.5, q=2.0, max_level=12, barrier=0.0, seed=17)
    rng = np.random.default_rng(77)
    theta = rng.standard_normal((10_000, 1))
    ys = rng.uniform(-1.0, 1.0, 10_000)
    ls = rng.integers(1, 13, 10_000)
    exact = model.exact(theta)
    bound_bad = mismatch = checked = 0
    for i in range(theta.shape[0]):
        g_l = model.evaluate(theta[i], int(ls[i]))[0]
        bound_bad += abs(g_l - exact[i]) > model.schedule.gamma ** ls[i] + 1e-15
        ind, _ = model.indicator_selective(theta[i], ys[i], int(ls[i]))
        if abs(exact[i] - ys[i]) > 2 * model.schedule.gamma ** ls[i]:
            checked += 1
            mismatch += ind != int(exact[i] <= ys[i])
    ok = bound_bad == 0 and mismatch == 0
    assert verdict("7", ok, f"bound violations={bound_bad}; indicator mismatches={mismatch} of {checked} checked")


def test_8_fem_exactness(verdict):
    model = DarcyModel()
    worst = 0.0
    for level in range(1, model.max_level + 1):
        solver = DarcySolver(UniformMesh.unit_square(model.mesh_cells(level)))
        u = solver.solve(np.ones(solver.mesh.triangles.shape[0]))
        worst = max(worst, float(np.max(np.abs(u - solver.mesh.nodes[:, 0]))))
    levels = range(1, model.max_level + 1)
    qoi = [float(model._level_data(lv)[2] @ model.solve(np.zeros(model.dim), lv)) for lv in levels]
    g0 = [float(model.evaluate(np.zeros(model.dim), lv)[0]) for lv in levels]
    ok = worst < 1e-9 and all(abs(v - 0.5) < 1e-9 for v in qoi) and all(abs(g - 0.42) < 1e-9 for g in g0)
    assert verdict("8", ok, f"max |u - x| = {worst:.2e}; QoI(0) = {[round(v, 12) for v in qoi]}; "
                            f"G(0) = {[round(g, 12) for g in g0]}")


def test_9_determinism(tmp_path, verdict):
    cfg = tmp_path / "det.json"
    cfg.write_text(json.dumps({"name": "det", "benchmark": "brownian", "estimators": ["sus", "ml-sus-sr"],
                               "tolerances": [0.3], "replicates": 3}))
    rows = []
    for tag in ("a", "b"):
        assert cli.main(["run", str(cfg), "--seed", "31", "--out", str(tmp_path / tag), "--quiet"]) == 0
        rows.append((tmp_path / tag / "det_raw.csv").read_bytes().splitlines()[1:])
    assert verdict("9", rows[0] == rows[1] and len(rows[0]) == 6, f"{len(rows[0])} data rows compared byte for byte")
