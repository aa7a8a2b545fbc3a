import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from mlsubset.estimators import (ConfigurationError, EstimationAborted, EstimatorConfig, ThresholdSchedule,
                                 adaptive_threshold_p0, fixed_schedule, run_ml_sus, run_sus, standard_mc,
                                 threshold_schedule_lemma)
from mlsubset.hierarchy import AccuracySchedule
from mlsubset.models.toy import ConstantModel, ToyModel


# -- schedules

def test_lemma_examples():
    s = threshold_schedule_lemma(0.5, [1, 2, 3])
    assert s.thresholds == (math.inf, 1.125, 0.375, 0.0)
    s = threshold_schedule_lemma(0.25, [2, 3, 4])
    assert s.thresholds[1:] == (0.09765625, 0.01953125, 0.0)
    assert threshold_schedule_lemma(0.5, [4]).thresholds == (math.inf, 0.0)


def test_lemma_darcy_levels():
    y = threshold_schedule_lemma(0.25, [2, 2, 2, 3, 4]).thresholds
    assert y[1:] == pytest.approx([0.34765625, 0.22265625, 0.09765625, 0.01953125, 0.0])


def test_lemma_checks_finest_level():
    with pytest.raises(ConfigurationError):
        threshold_schedule_lemma(AccuracySchedule(0.5, 2, 5), [1, 2, 3])
    with pytest.raises(ConfigurationError):
        threshold_schedule_lemma(0.5, [])
    assert threshold_schedule_lemma(AccuracySchedule(0.5, 2, 3), [1, 2, 3]).mode == "multilevel-lemma"


@given(st.lists(st.integers(1, 8), min_size=1, max_size=10), st.floats(0.05, 0.95))
def test_lemma_schedule_properties(levels, gamma):
    levels = sorted(levels)
    s = threshold_schedule_lemma(gamma, levels)
    assert s.thresholds[-1] == 0.0
    assert all(a > b for a, b in zip(s.thresholds, s.thresholds[1:]))
    assert s.lemma_violations(gamma) == []
    assert s.spacing_violations(gamma) == []


@pytest.mark.parametrize("y,lv", [((1.0, 0.5, 0.0), (1, 1)), ((math.inf, 0.0, 0.5), (1, 1)),
                                  ((math.inf, 1.0, 0.0), (2, 1)), ((math.inf, 0.0), (1, 1)),
                                  ((math.inf,), ())])
def test_schedule_validation(y, lv):
    with pytest.raises(ConfigurationError):
        ThresholdSchedule(y, lv)


def test_violation_reports():
    s = fixed_schedule([1.0, 0.9, 0.0], 3)
    assert s.spacing_violations(0.5) == [2]
    assert s.lemma_violations(0.5) == [1]


def test_p0_threshold_examples():
    assert adaptive_threshold_p0(np.arange(1, 11), 0.2) == (2.0, False)
    assert adaptive_threshold_p0([-3.0, -1.0, -0.5], 0.3) == (0.0, True)
    with pytest.raises(ValueError):
        adaptive_threshold_p0([], 0.1)


def test_p0_threshold_quantile():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(500)
    y, final = adaptive_threshold_p0(x, 0.1, target=-math.inf)
    assert not final
    boot = [adaptive_threshold_p0(rng.choice(x, 500), 0.1, target=-math.inf)[0] for _ in range(300)]
    assert abs(y - norm.ppf(0.1)) < 3 * np.std(boot)


# -- config

def test_budgets():
    cfg = EstimatorConfig(tol=0.2, s=2)
    assert cfg.budgets([1, 1, 1, 1]) == pytest.approx([0.0025] * 4)
    cost = EstimatorConfig(tol=0.2, s=2, allocation="cost")
    b = cost.budgets([16, 16, 16, 256, 4096])
    assert np.sqrt(b).sum() == pytest.approx(0.2)
    assert np.all(np.diff(b) >= 0)
    b1 = EstimatorConfig(tol=0.2, s=1, allocation="cost").budgets([1, 4, 16])
    assert b1.sum() == pytest.approx(0.04)


@given(st.integers(1, 12), st.floats(0.01, 1), st.sampled_from([1, 2]), st.floats(0.1, 1e4))
def test_cost_allocation_reduces_to_uniform(K, tol, s, c):
    a = EstimatorConfig(tol=tol, s=s, allocation="cost").budgets([c] * K)
    assert a == pytest.approx(EstimatorConfig(tol=tol, s=s).budgets([c] * K))


@pytest.mark.parametrize("kw", [dict(tol=0), dict(p0=1.0), dict(s=3), dict(n_min=10, n_max=5), dict(n_chains=0),
                                dict(eta=2), dict(first_subset="x"), dict(growth=1.0), dict(allocation="x"),
                                dict(seed_policy="x"), dict(first_p0=0)])
def test_config_errors(kw):
    with pytest.raises(ConfigurationError):
        EstimatorConfig(**kw)


def test_chain_count():
    assert EstimatorConfig(p0=0.1).chains_for(1000) == 100
    assert EstimatorConfig(p0=0.1, max_chains=50).chains_for(1000) == 50
    assert EstimatorConfig(n_chains=7).chains_for(1000) == 7
    assert EstimatorConfig().chains_for(3) == 1


# -- Monte Carlo

def test_mc_never_fails():
    r = standard_mc(ConstantModel(1.0), 2, 500)
    assert r.p_hat == 0.0 and r.cov_hat == math.inf


def test_mc_always_fails():
    r = standard_mc(ConstantModel(-1.0), 2, 500)
    assert r.p_hat == 1.0 and r.cov_hat == 0.0
    assert r.ledger.counts == {2: 500}


def test_mc_normal_tail():
    m = ToyModel(barrier=-2.0, max_level=30)
    r = standard_mc(m, 30, 100_000, seed=3)
    P = norm.cdf(-2.0)
    assert abs(r.p_hat - P) < 3 * math.sqrt(P * (1 - P) / 1e5)


def test_mc_input_errors():
    with pytest.raises(ValueError):
        standard_mc(ToyModel(), 2, 0)


# -- subset estimators

def _toy(seed=0):
    return ToyModel(barrier=-3.8, max_level=20, seed=seed)


def test_single_subset_reduces_to_mc():
    m = ToyModel(barrier=-1.0, max_level=10, seed=1)
    cfg = EstimatorConfig(tol=0.1)
    r = run_sus(m, cfg, fixed_schedule([0.0], 6), seed=5)
    assert r.p_hat == standard_mc(m, 6, r.subsets[0].n, seed=5).p_hat
    sel = EstimatorConfig(tol=0.1, selective=True)
    r2 = run_ml_sus(m, sel, levels=[10], seed=5)
    assert r2.p_hat == standard_mc(m, 10, r2.subsets[0].n, seed=5, selective=True).p_hat


def test_sus_toy_conditionals():
    y = [2.5, 1.8, 1.0, 0.5, 0.0]
    cond = np.diff(np.log(norm.cdf(np.array([math.inf] + [v - 3.8 for v in y]))))
    est = []
    for seed in range(6):
        r = run_sus(_toy(seed), EstimatorConfig(tol=0.2, s=1), fixed_schedule(y, 6), seed=seed)
        est.append([s.p_hat for s in r.subsets])
        assert r.p_hat == np.prod([s.p_hat for s in r.subsets])
        assert np.all(np.diff(r.partial_products()) <= 0)
    assert np.mean(est, axis=0) == pytest.approx(np.exp(cond), rel=0.25)
    assert np.all((np.exp(cond) > 0.09) & (np.exp(cond) < 0.24))


def test_sus_adaptive_thresholds():
    r = run_sus(_toy(1), EstimatorConfig(tol=0.3, p0=0.1, n_per_subset=2000), level=8, seed=2)
    assert [s.p_hat for s in r.subsets[:-1]] == pytest.approx([0.1] * (len(r.subsets) - 1), abs=0.01)
    assert r.p_hat == pytest.approx(norm.cdf(-3.8), rel=0.6)


def test_ml_equal_levels_matches_sus():
    cfg = EstimatorConfig(tol=0.15, selective=True)
    ml = run_ml_sus(_toy(2), cfg, levels=[8] * 6, seed=4)
    sus = run_sus(_toy(2), cfg, threshold_schedule_lemma(0.5, [8] * 6), seed=9)
    assert abs(ml.p_hat - sus.p_hat) < 3 * (ml.cov_hat * ml.p_hat + sus.cov_hat * sus.p_hat)


@settings(max_examples=8)
@given(st.integers(0, 10_000))
def test_ml_subset_property_holds(seed):
    r = run_ml_sus(_toy(seed), EstimatorConfig(tol=0.4, s=1, selective=True), levels=[1, 2, 3, 4], seed=seed)
    assert r.violations == 0
    assert all(0.0 <= s.p_hat <= 1.0 for s in r.subsets)
    assert r.cov_hat >= 0


def test_ml_conditionals_increase():
    ps = []
    for seed in range(20):
        r = run_ml_sus(_toy(seed), EstimatorConfig(tol=0.2, s=1, selective=True), levels=[1, 2, 3, 4], seed=seed)
        ps.append([s.p_hat for s in r.subsets])
    mean = np.mean(ps, axis=0)
    assert np.all(np.diff(mean) > 0)


def test_ml_first_subset_by_sus():
    cfg = EstimatorConfig(tol=0.3, selective=True, first_subset="auto", p1_hint=0.01, n_per_subset=1000)
    r = run_ml_sus(_toy(3), cfg, levels=[1, 2, 3, 4], seed=1)
    assert r.violations == 0
    assert r.p_hat == pytest.approx(norm.cdf(-3.8), rel=0.6)


def test_deterministic_reports():
    cfg = EstimatorConfig(tol=0.3, selective=True)
    a = run_ml_sus(_toy(), cfg, levels=[1, 2, 3, 4], seed=8)
    b = run_ml_sus(_toy(), cfg, levels=[1, 2, 3, 4], seed=8)
    assert a.p_hat == b.p_hat and a.ledger.counts == b.ledger.counts


def test_abort_on_empty_subset():
    with pytest.raises(EstimationAborted) as info:
        run_sus(ConstantModel(1.0), EstimatorConfig(tol=0.1, n_max=1000), fixed_schedule([0.0], 3))
    assert info.value.subset == 1


def test_schedule_checks():
    with pytest.raises(ConfigurationError):
        run_ml_sus(_toy(), EstimatorConfig(), schedule=fixed_schedule([0.1, 0.0], 3))
    with pytest.raises(ConfigurationError):
        run_sus(_toy(), EstimatorConfig(selective=True), fixed_schedule([0.1, 0.0], 3))
    with pytest.raises(ConfigurationError):
        run_sus(_toy(), EstimatorConfig(), ThresholdSchedule((math.inf, 1.0, 0.0), (2, 3)))
    with pytest.raises(ConfigurationError):
        run_ml_sus(_toy(), EstimatorConfig())
    with pytest.raises(ConfigurationError):
        run_sus(_toy(), EstimatorConfig())
