"""Monte Carlo, subset simulation and multilevel subset simulation estimators.

Subset ``j`` of a schedule is ``F_j = {G_{l_j} <= y_j}`` (or its selective
variant).  ``F_1`` is estimated with i.i.d. samples; each later conditional
probability ``P(F_j | F_{j-1})`` with shaking chains confined to ``F_{j-1}``.
Sample counts grow until the estimated c.o.v. of every factor meets its
share of ``tol``: ``K**-s * tol**2`` each, or weighted by level cost.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .diagnostics import combine_cov, estimate_autocorrelation, estimate_cov
from .hierarchy import AccuracySchedule, CostLedger, EvaluationCache, LimitStateModel
from .rng import generator
from .shaking import ChainEnsemble, Reservoir, SubsetSpec, limit_state_values, membership

MODES = ("classical-fixed", "classical-adaptive-p0", "multilevel-lemma")


class ConfigurationError(ValueError):
    pass


class EstimationAborted(RuntimeError):
    """A conditional probability could not be estimated (no members found)."""

    def __init__(self, message: str, subset: int, ledger: CostLedger | None = None):
        super().__init__(message)
        self.subset = subset
        self.ledger = ledger


@dataclass(frozen=True)
class ThresholdSchedule:
    """Thresholds ``y_0 = inf > y_1 > ... > y_K`` and levels ``l_1 <= ... <= l_K``."""

    thresholds: tuple
    levels: tuple
    mode: str = "classical-fixed"

    def __post_init__(self):
        y = tuple(float(v) for v in self.thresholds)
        lv = tuple(int(v) for v in self.levels)
        object.__setattr__(self, "thresholds", y)
        object.__setattr__(self, "levels", lv)
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown schedule mode {self.mode!r}")
        if len(lv) < 1:
            raise ConfigurationError("schedule needs at least one subset")
        if len(y) != len(lv) + 1:
            raise ConfigurationError("need one more threshold than levels (y_0 = inf included)")
        if not (math.isinf(y[0]) and y[0] > 0):
            raise ConfigurationError("y_0 must be +inf")
        if any(not a > b for a, b in zip(y, y[1:])):
            raise ConfigurationError(f"thresholds must be strictly decreasing: {y}")
        if any(b < a for a, b in zip(lv, lv[1:])):
            raise ConfigurationError(f"levels must be non-decreasing: {lv}")

    @property
    def K(self) -> int:
        return len(self.levels)

    def subset(self, j: int, selective: bool) -> SubsetSpec:
        """``F_j`` for ``j = 0..K``; ``F_0`` is the whole space."""
        if j == 0:
            return SubsetSpec(math.inf, self.levels[0], False)
        return SubsetSpec(self.thresholds[j], self.levels[j - 1], selective)

    def spacing_violations(self, gamma: float) -> list[int]:
        """Subsets ``j >= 2`` with ``y_{j-1} - y_j < 2 gamma**l_j``."""
        y, lv = self.thresholds, self.levels
        return [j for j in range(2, self.K + 1) if y[j - 1] - y[j] < 2 * gamma ** lv[j - 1] * (1 - 1e-12)]

    def lemma_violations(self, gamma: float) -> list[int]:
        """Subsets ``j >= 1`` with ``y_j < y_{j+1} + gamma**l_j + gamma**l_{j+1}``."""
        y, lv = self.thresholds, self.levels
        bad = []
        for j in range(1, self.K):
            need = y[j + 1] + gamma ** lv[j - 1] + gamma ** lv[j]
            if y[j] < need * (1 - 1e-12) - 1e-15:
                bad.append(j)
        return bad


def threshold_schedule_lemma(schedule, levels) -> ThresholdSchedule:
    """Thresholds ``y_K = 0``, ``y_j = y_{j+1} + gamma**l_j + gamma**l_{j+1}``.

    ``schedule`` is an :class:`AccuracySchedule` (whose ``max_level`` must be
    the last level) or a bare ``gamma``.
    """
    levels = [int(v) for v in levels]
    if not levels:
        raise ConfigurationError("empty level list")
    if isinstance(schedule, AccuracySchedule):
        gamma = schedule.gamma
        if levels[-1] != schedule.max_level:
            raise ConfigurationError(f"last level {levels[-1]} must equal max_level {schedule.max_level}")
    else:
        gamma = float(schedule)
    K = len(levels)
    y = [0.0] * (K + 1)
    for j in range(K - 1, 0, -1):
        y[j] = y[j + 1] + gamma ** levels[j - 1] + gamma ** levels[j]
    y[0] = math.inf
    return ThresholdSchedule(tuple(y), tuple(levels), "multilevel-lemma")


def fixed_schedule(thresholds, level: int) -> ThresholdSchedule:
    """Classical schedule at one level; ``thresholds`` lists ``y_1 > ... > y_K``."""
    return ThresholdSchedule((math.inf, *thresholds), (int(level),) * len(thresholds), "classical-fixed")


def adaptive_threshold_p0(samples, p0: float, target: float = 0.0) -> tuple[float, bool]:
    """The ``ceil(p0 N)``-th smallest sample, or ``(target, True)`` once it is ``<= target``."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size == 0:
        raise ValueError("no samples")
    if not 0.0 < p0 < 1.0:
        raise ValueError("p0 must lie in (0, 1)")
    y = float(x[max(math.ceil(p0 * x.size), 1) - 1])
    if y <= target:
        return float(target), True
    return y, False


@dataclass
class EstimatorConfig:
    """Knobs shared by the subset estimators.

    ``s`` selects how per-subset c.o.v. values combine (1 uncorrelated, 2
    fully correlated) and thereby the per-subset budget.  ``allocation``
    splits that budget evenly (``"uniform"``) or gives subsets on costlier
    levels a larger share (``"cost"``).  ``n_per_subset`` is only used when
    thresholds are picked adaptively.
    """

    tol: float = 0.1
    p0: float = 0.1
    s: int = 2
    n_min: int = 100
    n_max: int = 200_000
    selective: bool = False
    n_chains: int | None = None
    max_chains: int = 2000
    eta: float = 0.6
    first_subset: str = "auto"
    p1_hint: float | None = None
    n_per_subset: int = 1000
    check_subset_property: bool = True
    seed_policy: str = "uniform"
    growth: float = 1.2
    max_subsets: int = 30
    allocation: str = "uniform"
    first_p0: float = 0.2

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigurationError("tol must be positive")
        if not (0.0 < self.p0 < 1.0 and 0.0 < self.first_p0 < 1.0):
            raise ConfigurationError("p0 and first_p0 must lie in (0, 1)")
        if self.s not in (1, 2):
            raise ConfigurationError("s must be 1 or 2")
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigurationError("need 1 <= n_min <= n_max")
        if self.n_chains is not None and self.n_chains < 1:
            raise ConfigurationError("n_chains must be >= 1")
        if self.max_chains < 1:
            raise ConfigurationError("max_chains must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError("eta must lie in [0, 1]")
        if self.first_subset not in ("auto", "mc", "sus"):
            raise ConfigurationError("first_subset must be auto, mc or sus")
        if self.seed_policy not in ("uniform", "first"):
            raise ConfigurationError("seed_policy must be uniform or first")
        if self.allocation not in ("uniform", "cost"):
            raise ConfigurationError("allocation must be uniform or cost")
        if self.growth <= 1.0:
            raise ConfigurationError("growth must exceed 1")

    def budget(self, K: int) -> float:
        return K ** (-self.s) * self.tol**2

    def budgets(self, costs) -> np.ndarray:
        """Squared c.o.v. target of each factor.

        With equal variance per sample, ``sum N_j c_j`` is minimised by
        ``delta_j**2 ~ sqrt(c_j)`` when squares add (``s = 1``) and by
        ``delta_j ~ c_j**(1/3)`` when the c.o.v. values add (``s = 2``).
        """
        c = np.asarray(costs, dtype=float)
        if self.allocation == "uniform":
            return np.full(c.size, self.budget(c.size))
        if self.s == 1:
            w = np.sqrt(c)
            return self.tol**2 * w / w.sum()
        w = np.cbrt(c)
        return (self.tol * w / w.sum()) ** 2

    def chains_for(self, n_previous: int) -> int:
        """Chains per subset: fixed, or ``floor(p0 N)`` of the previous subset (capped)."""
        if self.n_chains is not None:
            return self.n_chains
        return int(min(max(1, math.floor(self.p0 * n_previous)), self.max_chains))

    @property
    def reservoir_size(self) -> int:
        return self.n_chains if self.n_chains is not None else self.max_chains


@dataclass
class SubsetResult:
    threshold: float
    level: int
    p_hat: float
    n: int
    acceptance: float = math.nan
    phi: float = 0.0
    cov: float = math.inf
    violations: int = 0


@dataclass
class EstimateReport:
    p_hat: float
    subsets: list = field(default_factory=list)
    cov_hat: float = math.inf
    ledger: CostLedger = field(default_factory=CostLedger)
    violations: int = 0
    seed: int = 0
    replicate_id: int = 0

    @property
    def total_cost(self) -> float:
        return self.ledger.total_cost

    def partial_products(self) -> np.ndarray:
        return np.cumprod([s.p_hat for s in self.subsets])


def _report(subsets, ledger, s, seed, replicate_id) -> EstimateReport:
    p = 1.0
    for r in subsets:
        p *= r.p_hat
    cov = combine_cov([r.cov for r in subsets], s)
    return EstimateReport(p, subsets, cov, ledger, sum(r.violations for r in subsets), seed, replicate_id)


def standard_mc(model: LimitStateModel, level: int, n: int, seed: int = 0, selective: bool = False,
                threshold: float = 0.0, replicate_id: int = 0) -> EstimateReport:
    """Plain Monte Carlo with ``n`` i.i.d. samples of ``1{G_level <= threshold}``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    model._check_level(level)
    rng = generator(seed, 0)
    ledger = CostLedger()
    theta = rng.standard_normal((n, model.dim))
    spec = SubsetSpec(threshold, level, selective)
    ind = membership(model, spec, theta, EvaluationCache(n, model.max_level), ledger)
    p = float(ind.mean())
    res = SubsetResult(threshold, level, p, n, cov=estimate_cov(p, n))
    return EstimateReport(p, [res], res.cov, ledger, 0, seed, replicate_id)


def _next_n(n: int, cov: float, budget: float, growth: float, cap: int) -> int:
    if math.isinf(cov):
        want = 4 * n
    else:
        want = max(math.ceil(n * cov**2 / budget), math.ceil(growth * n))
    return min(max(want, n + 1), cap)


def _mc_subset(model, spec: SubsetSpec, cfg: EstimatorConfig, budget: float, rng, ledger, keep: int, j: int = 1,
               key_rng=None):
    """I.i.d. estimate of ``P(spec)`` with adaptive sample size; returns result and seeds.

    Reservoir keys come from ``key_rng`` so the samples themselves are a
    prefix of the stream :func:`standard_mc` draws for the same seed.
    """
    key_rng = rng if key_rng is None else key_rng
    width = model.max_level + 1
    res = Reservoir(keep, model.dim, width)
    hits, n, target = 0, 0, cfg.n_min
    while True:
        m = target - n
        theta = rng.standard_normal((m, model.dim))
        cache = EvaluationCache(m, model.max_level)
        ind = membership(model, spec, theta, cache, ledger)
        keys = key_rng.random(m)
        res.offer(keys[ind], theta[ind], cache.values[ind])
        hits += int(ind.sum())
        n = target
        p = hits / n
        cov = estimate_cov(p, n)
        if cov**2 <= budget or n >= cfg.n_max:
            break
        target = _next_n(n, cov, budget, cfg.growth, cfg.n_max)
    if hits == 0:
        raise EstimationAborted(f"subset {j} (y={spec.threshold:g}, level {spec.level}) has no members "
                                f"after {n} samples", j, ledger)
    return SubsetResult(spec.threshold, spec.level, p, n, cov=cov), res


def _draw_seeds(res: Reservoir, n_chains: int, rng):
    """``n_chains`` seeds from the reservoir, repeating states if it holds fewer."""
    idx = np.arange(len(res))
    if idx.size < n_chains:
        idx = np.concatenate([idx, rng.choice(idx, n_chains - idx.size)])
    return res.states[idx[:n_chains]], res.values[idx[:n_chains]]


def _chain_subset(model, seeds, seed_values, current: SubsetSpec, target: SubsetSpec, previous,
                  cfg: EstimatorConfig, budget: float, rng, ledger, keep: int, j: int):
    ens = ChainEnsemble(model, seeds, seed_values, current, target, cfg.eta, rng, ledger,
                        previous=previous if cfg.check_subset_property else None,
                        keep=keep, record=cfg.seed_policy == "first")
    nc = ens.n_chains
    cap = max(cfg.n_max // nc, 1)
    # at least two recorded states per chain so that correlation is estimable
    steps = min(max(math.ceil(cfg.n_min / nc), 2), max(cap, 2))
    while True:
        ens.extend(steps)
        p = ens.p_hat()
        phi = estimate_autocorrelation(ens.indicator_matrix()) if 0 < p < 1 else 0.0
        cov = estimate_cov(p, ens.n_samples, phi)
        if cov**2 <= budget or steps >= cap:
            break
        steps = _next_n(steps, cov, budget, cfg.growth, cap)
    if p == 0.0:
        raise EstimationAborted(f"subset {j} (y={target.threshold:g}, level {target.level}) has no members "
                                f"after {ens.n_samples} samples", j, ledger)
    out = SubsetResult(target.threshold, target.level, p, ens.n_samples, ens.acceptance_rate(), phi, cov,
                       ens.violations)
    if cfg.seed_policy == "first":
        states, values = ens.first_inner_states()
        res = Reservoir(len(states), model.dim, values.shape[1])
        res.offer(np.arange(len(states), dtype=float), states, values)
        return out, res
    return out, ens.reservoir


def _run_schedule(model, schedule: ThresholdSchedule, cfg: EstimatorConfig, seed: int, replicate_id: int,
                  first=None) -> EstimateReport:
    """Shared driver: ``F_1`` by MC (or by ``first``), then one chain stage per subset."""
    K = schedule.K
    budgets = cfg.budgets([model.level_cost(lv) for lv in schedule.levels])
    ledger = CostLedger()
    results = []
    keep = cfg.reservoir_size
    spec1 = schedule.subset(1, cfg.selective)
    if first is None:
        r1, res = _mc_subset(model, spec1, cfg, budgets[0], generator(seed, 0), ledger, keep,
                             key_rng=generator(seed, 0, 1))
    else:
        r1, res = first(spec1, ledger)
    results.append(r1)
    for j in range(2, K + 1):
        rng = generator(seed, j)
        nc = cfg.chains_for(results[-1].n)
        if cfg.n_chains is None:
            nc = min(nc, len(res))  # distinct seeds only
        seeds, values = _draw_seeds(res, nc, rng)
        previous = schedule.subset(j - 2, cfg.selective) if j >= 3 else None
        r, res = _chain_subset(model, seeds, values, schedule.subset(j - 1, cfg.selective),
                               schedule.subset(j, cfg.selective), previous, cfg, budgets[j - 1], rng, ledger, keep, j)
        results.append(r)
    return _report(results, ledger, cfg.s, seed, replicate_id)


def _adaptive_sus(model, level: int, target: SubsetSpec, cfg: EstimatorConfig, seed: int, ledger: CostLedger):
    """Classical subset simulation with ``p0``-quantile thresholds.

    Each stage holds about ``n_per_subset`` samples: the members of the
    previous stage below its threshold each seed a chain.  Intermediate
    subsets use plain level-``level`` values; the last factor is the fraction
    of the final stage inside ``target``.  Returns the per-subset results and
    a reservoir of ``target`` members.
    """
    N = cfg.n_per_subset
    theta = generator(seed, 0).standard_normal((N, model.dim))
    cache = EvaluationCache(N, model.max_level)
    g = limit_state_values(model, SubsetSpec(0.0, level, False), theta, cache, ledger)
    chains = None  # indicator layout (n_chains, steps) of the current stage
    acc = math.nan
    results = []
    for j in range(1, cfg.max_subsets + 1):
        y, final = adaptive_threshold_p0(g, cfg.p0, target.threshold)
        inside = membership(model, target, theta, cache, ledger) if final else g <= y
        p = float(inside.mean())
        phi = 0.0
        if chains is not None and 0 < p < 1:
            phi = estimate_autocorrelation(inside.reshape(chains[::-1]).T)
        results.append(SubsetResult(target.threshold if final else y, level, p, inside.size, acc, phi,
                                    estimate_cov(p, inside.size, phi)))
        if p == 0.0:
            raise EstimationAborted(f"subset {j} (y={target.threshold:g}) has no members", j, ledger)
        if final:
            m = int(inside.sum())
            res = Reservoir(m, model.dim, cache.values.shape[1])
            res.offer(generator(seed, j, 1).random(m), theta[inside], cache.values[inside])
            return results, res
        seeds = theta[inside]
        steps = math.ceil(N / seeds.shape[0])
        ens = ChainEnsemble(model, seeds, cache.values[inside], SubsetSpec(y, level, False),
                            SubsetSpec(math.inf, level, False), cfg.eta, generator(seed, j), ledger, record=True)
        ens.extend(steps)
        acc = ens.acceptance_rate()
        chains = (seeds.shape[0], steps)
        # step-major flattening: sample t of chain c sits at t * n_chains + c
        theta = np.concatenate(ens.history_states)
        cache = EvaluationCache(0, 0, np.concatenate(ens.history_values))
        g = cache.values[:, level].copy()
    raise EstimationAborted(f"no convergence to the target within {cfg.max_subsets} subsets", cfg.max_subsets, ledger)


def run_sus(model: LimitStateModel, config: EstimatorConfig, schedule: ThresholdSchedule | None = None,
            level: int | None = None, seed: int = 0, replicate_id: int = 0) -> EstimateReport:
    """Subset simulation at a single accuracy level.

    With a ``schedule`` the thresholds are fixed and sample counts adapt to
    the c.o.v. budget (selective refinement if ``config.selective``).
    Without one, thresholds are ``p0``-quantiles at ``level`` with
    ``config.n_per_subset`` samples per subset.
    """
    if schedule is None:
        if level is None:
            raise ConfigurationError("adaptive thresholds need a level")
        model._check_level(level)
        ledger = CostLedger()
        results, _ = _adaptive_sus(model, level, SubsetSpec(0.0, level, False), config, seed, ledger)
        return _report(results, ledger, config.s, seed, replicate_id)
    if len(set(schedule.levels)) != 1:
        raise ConfigurationError("single-level subset simulation needs one level for all subsets")
    model._check_level(schedule.levels[0])
    if config.selective and schedule.spacing_violations(model.schedule.gamma):
        raise ConfigurationError("thresholds closer than 2 gamma**L break nesting under selective refinement")
    return _run_schedule(model, schedule, config, seed, replicate_id)


def run_ml_sus(model: LimitStateModel, config: EstimatorConfig, levels=None,
               schedule: ThresholdSchedule | None = None, seed: int = 0, replicate_id: int = 0) -> EstimateReport:
    """Multilevel subset simulation with lemma-spaced thresholds.

    Either ``levels`` (thresholds are then derived) or a full ``schedule`` is
    given; a supplied schedule must respect the spacing that guarantees
    nested subsets.
    """
    gamma = model.schedule.gamma
    if schedule is None:
        if levels is None:
            raise ConfigurationError("give levels or a schedule")
        schedule = threshold_schedule_lemma(gamma, levels)
    elif schedule.lemma_violations(gamma):
        raise ConfigurationError(f"thresholds violate the nesting spacing at subsets {schedule.lemma_violations(gamma)}")
    for lv in schedule.levels:
        model._check_level(lv)
    mode = config.first_subset
    if mode == "auto":
        mode = "sus" if config.p1_hint is not None and config.p1_hint < 0.05 else "mc"
    first = None
    if mode == "sus":
        coarse_cfg = replace(config, p0=config.first_p0)

        def first(spec1, ledger):
            results, res = _adaptive_sus(model, spec1.level, spec1, coarse_cfg, seed, ledger)
            p = float(np.prod([r.p_hat for r in results]))
            cov = combine_cov([r.cov for r in results], config.s)
            n = sum(r.n for r in results)
            return SubsetResult(spec1.threshold, spec1.level, p, n, cov=cov), res
    return _run_schedule(model, schedule, config, seed, replicate_id, first)
