"""Gaussian shaking proposals and the one-path chain driver over nested subsets.

A chain lives in the current subset ``{G <= y_j}`` (evaluated at that
subset's accuracy level, optionally with selective refinement).  Each step
proposes ``sqrt(1 - eta**2) x + eta * Y`` with fresh ``Y ~ N(0, I)`` and keeps
it only if it stays in the subset.  Before every step the chain records
whether its current state lies in the next, smaller subset.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hierarchy import CostLedger, EvaluationCache, LimitStateModel, plain_values, selective_values


class ChainPreconditionError(ValueError):
    pass


def shake(theta, noise, eta: float) -> np.ndarray:
    """``sqrt(1 - eta**2) * theta + eta * noise``."""
    theta = np.asarray(theta, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if theta.shape != noise.shape:
        raise ValueError(f"shape mismatch: {theta.shape} vs {noise.shape}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    return math.sqrt(1.0 - eta * eta) * theta + eta * noise


@dataclass(frozen=True)
class SubsetSpec:
    """``{theta : G(theta) <= threshold}`` with ``G`` computed at ``level``.

    ``selective=True`` evaluates ``G`` by selective refinement towards the
    threshold.  An infinite threshold is the whole parameter space.
    """

    threshold: float
    level: int
    selective: bool = False

    @property
    def whole_space(self) -> bool:
        return math.isinf(self.threshold) and self.threshold > 0


def limit_state_values(model: LimitStateModel, spec: SubsetSpec, theta: np.ndarray,
                       cache: EvaluationCache, ledger: CostLedger | None) -> np.ndarray:
    if spec.selective:
        return selective_values(model, theta, spec.threshold, spec.level, cache, ledger)[0]
    return plain_values(model, theta, spec.level, cache, ledger)


def membership(model: LimitStateModel, spec: SubsetSpec, theta: np.ndarray,
               cache: EvaluationCache, ledger: CostLedger | None) -> np.ndarray:
    """Boolean membership of each row of ``theta`` (charges ``ledger`` for new evaluations)."""
    if spec.whole_space:
        return np.ones(theta.shape[0], dtype=bool)
    return limit_state_values(model, spec, theta, cache, ledger) <= spec.threshold


@dataclass(frozen=True)
class ShakingConfig:
    eta: float = 0.6
    rng_seed: int = 0
    dim: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")


def rejection_step(theta, noise, subset: SubsetSpec, model: LimitStateModel, eta: float = 0.6,
                   ledger: CostLedger | None = None):
    """One shaking proposal restricted to ``subset``.

    Returns ``(new_theta, accepted, cost)``; ``cost`` is what the membership
    test of the proposal charged.
    """
    proposal = shake(theta, noise, eta)
    own = CostLedger()
    ok = bool(membership(model, subset, model._as_batch(proposal), EvaluationCache(1, model.max_level), own)[0])
    if ledger is not None:
        ledger.absorb(own)
    return (proposal if ok else np.asarray(theta, dtype=float).copy()), ok, own.total_cost


class Reservoir:
    """Uniform sample without replacement of at most ``size`` items, via smallest random keys."""

    def __init__(self, size: int, dim: int, width: int):
        self.size = size
        self.keys = np.empty(0)
        self.states = np.empty((0, dim))
        self.values = np.empty((0, width))

    def offer(self, keys, states, values) -> None:
        if keys.size == 0:
            return
        k = np.concatenate([self.keys, keys])
        order = np.argsort(k, kind="stable")[: self.size]
        self.keys = k[order]
        self.states = np.concatenate([self.states, states])[order]
        self.values = np.concatenate([self.values, values])[order]

    def __len__(self) -> int:
        return self.keys.size


class ChainEnsemble:
    """Several one-path chains advanced in lockstep on the same subset.

    Parameters
    ----------
    seeds, seed_values : arrays
        Starting states and their cached limit-state values (one row each).
    current, target : SubsetSpec
        The subset the chains live in and the subset whose indicator is recorded.
    previous : SubsetSpec, optional
        Enclosing subset; every accepted proposal is checked against it
        without charging cost, and failures are counted in ``violations``.
    keep : int
        Size of the uniform reservoir of target-subset states handed on as
        seeds of the next subset.
    record : bool
        Keep every visited state and its cached values (needed when the next
        threshold is picked from the chain output).
    """

    def __init__(self, model: LimitStateModel, seeds, seed_values, current: SubsetSpec, target: SubsetSpec,
                 eta: float, rng: np.random.Generator, ledger: CostLedger,
                 previous: SubsetSpec | None = None, keep: int = 0, record: bool = False):
        self.model = model
        self.states = np.array(seeds, dtype=float)
        self.cache = EvaluationCache(0, 0, np.array(seed_values, dtype=float))
        self.current, self.target, self.previous = current, target, previous
        self.eta = eta
        self.rng = rng
        self.ledger = ledger
        self.n_chains = self.states.shape[0]
        probe = EvaluationCache(0, 0, self.cache.values.copy())
        if not membership(model, current, self.states, probe, None).all():
            raise ChainPreconditionError("seed state is not a member of the current subset")
        self.indicators: list[np.ndarray] = []
        self.first_inner = np.full(self.n_chains, -1)
        self.accepted = np.zeros(self.n_chains, dtype=int)
        self.proposals = 0
        self.violations = 0
        self.reservoir = Reservoir(keep, model.dim, self.cache.values.shape[1])
        self.record = record
        self.history_states: list[np.ndarray] = []
        self.history_values: list[np.ndarray] = []

    @property
    def n_steps(self) -> int:
        return len(self.indicators)

    @property
    def n_samples(self) -> int:
        return self.n_steps * self.n_chains

    def indicator_matrix(self) -> np.ndarray:
        return np.array(self.indicators, dtype=float).T

    def p_hat(self) -> float:
        return float(np.mean(self.indicators)) if self.indicators else math.nan

    def acceptance_rate(self) -> float:
        return float(self.accepted.sum() / self.proposals) if self.proposals else math.nan

    def _step(self) -> None:
        noise = self.rng.standard_normal(self.states.shape)
        proposal = shake(self.states, noise, self.eta)
        pcache = EvaluationCache(proposal.shape[0], self.cache.values.shape[1] - 1)
        ok = membership(self.model, self.current, proposal, pcache, self.ledger)
        self.proposals += self.n_chains
        if ok.any():
            idx = np.flatnonzero(ok)
            if self.previous is not None and not self.previous.whole_space:
                probe = pcache.take(idx)
                inside = membership(self.model, self.previous, proposal[idx], probe, None)
                self.violations += int((~inside).sum())
            self.states[idx] = proposal[idx]
            self.cache.values[idx] = pcache.values[idx]
            self.accepted[idx] += 1

    def _observe(self) -> None:
        ind = membership(self.model, self.target, self.states, self.cache, self.ledger)
        keys = self.rng.random(self.n_chains)
        fresh = (self.first_inner < 0) & ind
        self.first_inner[fresh] = self.n_steps
        self.indicators.append(ind)
        if self.record:
            self.history_states.append(self.states.copy())
            self.history_values.append(self.cache.values.copy())
        if self.reservoir.size and ind.any():
            self.reservoir.offer(keys[ind], self.states[ind], self.cache.values[ind])

    def extend(self, n_steps: int) -> None:
        """Advance until every chain has recorded ``n_steps`` states."""
        while self.n_steps < n_steps:
            if self.n_steps > 0:
                self._step()
            self._observe()

    def first_inner_states(self):
        """Per chain, the first recorded state inside the target subset (POP hand-off)."""
        if not self.record:
            raise RuntimeError("first-inner seeds need record=True")
        rows = np.flatnonzero(self.first_inner >= 0)
        steps = self.first_inner[rows]
        states = np.array([self.history_states[t][r] for t, r in zip(steps, rows)]).reshape(-1, self.model.dim)
        values = np.array([self.history_values[t][r] for t, r in zip(steps, rows)]).reshape(-1, self.cache.values.shape[1])
        return states, values


@dataclass
class ChainRecord:
    states: np.ndarray
    indicators: np.ndarray
    accepted: int
    costs: CostLedger = field(default_factory=CostLedger)
    first_inner_index: int | None = None

    @property
    def estimate(self) -> float:
        return float(np.mean(self.indicators))


def run_chain(seed_state, n_steps: int, current: SubsetSpec, next_subset: SubsetSpec,
              config: ShakingConfig, model: LimitStateModel) -> ChainRecord:
    """A single one-path chain of ``n_steps`` recorded states."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    seed = model._as_batch(seed_state)
    ledger = CostLedger()
    rng = np.random.default_rng(config.rng_seed)
    cache = EvaluationCache(1, model.max_level)
    ens = ChainEnsemble(model, seed, cache.values, current, next_subset, config.eta, rng, ledger, record=True)
    ens.extend(n_steps)
    first = int(ens.first_inner[0])
    return ChainRecord(
        states=np.array([s[0] for s in ens.history_states]),
        indicators=ens.indicator_matrix()[0].astype(int),
        accepted=int(ens.accepted[0]),
        costs=ledger,
        first_inner_index=first if first >= 0 else None,
    )
