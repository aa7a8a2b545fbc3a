"""Hierarchies of limit-state approximations, selective refinement and cost bookkeeping.

A model exposes ``G_l`` for accuracy levels ``l = 1..L`` with the nominal
guarantee ``|G - G_l| <= gamma**l``.  Evaluations of a batch of parameter
vectors are memoised per sample in an :class:`EvaluationCache` so that
revisiting a level (which selective refinement does constantly) is never
charged twice.
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np


class InvalidLevelError(ValueError):
    pass


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class AccuracySchedule:
    """Error-reduction factor ``gamma``, cost exponent ``q`` and finest level."""

    gamma: float
    q: float
    max_level: int

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.q < 0:
            raise ValueError(f"q must be nonnegative, got {self.q}")
        if self.max_level < 1:
            raise ValueError(f"max_level must be >= 1, got {self.max_level}")

    def error_bound(self, level: int) -> float:
        return self.gamma**level

    def nominal_cost(self, level: int) -> float:
        return self.gamma ** (-level * self.q)


@dataclass(frozen=True)
class LevelledValue:
    value: float
    level: int
    error_bound: float
    cost: float
    certified: bool = True


@dataclass
class CostLedger:
    """Evaluation counts and work units per accuracy level."""

    counts: dict[int, int] = field(default_factory=dict)
    costs: dict[int, float] = field(default_factory=dict)

    def charge(self, level: int, n: int, unit_cost: float) -> None:
        if n < 0 or unit_cost < 0:
            raise ValueError("charges must be nonnegative")
        if n == 0:
            return
        self.counts[level] = self.counts.get(level, 0) + int(n)
        self.costs[level] = self.costs.get(level, 0.0) + n * unit_cost

    @property
    def total_cost(self) -> float:
        return math.fsum(self.costs[k] for k in sorted(self.costs))

    @property
    def total_count(self) -> int:
        return sum(self.counts.values())

    def copy(self) -> "CostLedger":
        return CostLedger(dict(self.counts), dict(self.costs))

    def merge(self, other: "CostLedger") -> "CostLedger":
        return ledger_merge(self, other)

    def absorb(self, other: "CostLedger") -> None:
        """In-place version of :meth:`merge`."""
        for level, n in other.counts.items():
            self.counts[level] = self.counts.get(level, 0) + n
        for level, c in other.costs.items():
            self.costs[level] = self.costs.get(level, 0.0) + c

    def to_dict(self) -> dict:
        return {
            "counts": {str(k): self.counts[k] for k in sorted(self.counts)},
            "costs": {str(k): self.costs[k] for k in sorted(self.costs)},
            "total_cost": self.total_cost,
        }


def ledger_merge(a: CostLedger, b: CostLedger) -> CostLedger:
    out = a.copy()
    out.absorb(b)
    return out


class EvaluationCache:
    """Per-sample memo of ``G_l`` values; column ``l`` holds level ``l`` (NaN = not computed)."""

    def __init__(self, n: int, max_level: int, values: np.ndarray | None = None):
        if values is None:
            values = np.full((n, max_level + 1), np.nan)
        self.values = values

    @classmethod
    def empty_like(cls, other: "EvaluationCache", n: int) -> "EvaluationCache":
        return cls(n, other.values.shape[1] - 1)

    def __len__(self) -> int:
        return self.values.shape[0]

    def take(self, idx) -> "EvaluationCache":
        return EvaluationCache(0, 0, self.values[idx].copy())

    def put(self, idx, other: "EvaluationCache") -> None:
        self.values[idx] = other.values

    def highest_level(self) -> np.ndarray:
        """Finest level computed per sample (0 if none)."""
        done = ~np.isnan(self.values)
        lv = np.arange(self.values.shape[1])
        return np.where(done.any(axis=1), (done * lv).max(axis=1), 0)


class LimitStateModel(ABC):
    """A hierarchy ``G_1, ..., G_L`` of approximations to a limit-state function.

    Subclasses implement :meth:`_evaluate` for a batch ``theta`` of shape
    ``(n, dim)``.  Evaluation must be a pure function of ``(theta, level)``
    and the model's own fixed parameters.
    """

    #: first level visited by selective refinement
    coarsest_level: int = 1

    def __init__(self, dim: int, schedule: AccuracySchedule):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = int(dim)
        self.schedule = schedule

    @abstractmethod
    def _evaluate(self, theta: np.ndarray, level: int) -> np.ndarray:
        ...

    def level_cost(self, level: int) -> float:
        """Work units charged for one evaluation at ``level``."""
        return self.schedule.nominal_cost(level)

    def exact(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no exact oracle")

    @property
    def max_level(self) -> int:
        return self.schedule.max_level

    def _check_level(self, level: int) -> None:
        if not (isinstance(level, (int, np.integer)) and 1 <= level <= self.max_level):
            raise InvalidLevelError(f"level {level} outside 1..{self.max_level}")

    def _as_batch(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            theta = theta[None, :]
        if theta.ndim != 2 or theta.shape[1] != self.dim:
            raise InvalidInputError(f"expected parameter vectors of dimension {self.dim}, got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise InvalidInputError("parameter vector has non-finite entries")
        return theta

    def evaluate(self, theta, level: int) -> np.ndarray:
        """Uncharged batch evaluation of ``G_level``."""
        self._check_level(level)
        theta = self._as_batch(theta)
        return np.asarray(self._evaluate(theta, int(level)), dtype=float)

    # single-sample conveniences

    def evaluate_at_level(self, theta, level: int, ledger: CostLedger | None = None) -> LevelledValue:
        value = float(self.evaluate(theta, level)[0])
        cost = self.level_cost(level)
        if ledger is not None:
            ledger.charge(level, 1, cost)
        return LevelledValue(value, int(level), self.schedule.error_bound(level), cost)

    def selective_evaluate(self, theta, y: float, target_level: int,
                           ledger: CostLedger | None = None) -> LevelledValue:
        self._check_level(target_level)
        theta = self._as_batch(theta)
        if theta.shape[0] != 1:
            raise InvalidInputError("selective_evaluate takes a single parameter vector")
        own = CostLedger()
        cache = EvaluationCache(1, self.max_level)
        values, levels = selective_values(self, theta, y, target_level, cache, own)
        if ledger is not None:
            ledger.absorb(own)
        lvl = int(levels[0])
        return LevelledValue(float(values[0]), lvl, self.schedule.error_bound(lvl), own.total_cost)

    def indicator_selective(self, theta, y: float, target_level: int,
                            ledger: CostLedger | None = None) -> tuple[int, LevelledValue]:
        lv = self.selective_evaluate(theta, y, target_level, ledger)
        return int(lv.value <= y), lv


def plain_values(model: LimitStateModel, theta: np.ndarray, level: int,
                 cache: EvaluationCache, ledger: CostLedger | None) -> np.ndarray:
    """``G_level`` for every row of ``theta``, computing only what the cache lacks."""
    col = cache.values[:, level]
    missing = np.flatnonzero(np.isnan(col))
    if missing.size:
        col[missing] = model.evaluate(theta[missing], level)
        if ledger is not None:
            ledger.charge(level, missing.size, model.level_cost(level))
    return col.copy()


def selective_values(model: LimitStateModel, theta: np.ndarray, y: float, target_level: int,
                     cache: EvaluationCache, ledger: CostLedger | None) -> tuple[np.ndarray, np.ndarray]:
    """Selective refinement of a batch towards threshold ``y``.

    Refines level by level and stops a sample at the first level ``j`` with
    ``gamma**j <= |G_j - y|`` (the sign of ``G - y`` is then certified) or at
    ``target_level``.  Ties stop.  Returns the stopping values and levels.
    """
    n = theta.shape[0]
    gamma = model.schedule.gamma
    values = np.empty(n)
    levels = np.empty(n, dtype=int)
    active = np.arange(n)
    start = min(model.coarsest_level, target_level)
    for j in range(start, target_level + 1):
        col = cache.values[:, j]
        g = col[active]
        missing = np.isnan(g)
        if missing.any():
            rows = active[missing]
            g[missing] = model.evaluate(theta[rows], j)
            col[rows] = g[missing]
            if ledger is not None:
                ledger.charge(j, rows.size, model.level_cost(j))
        if j == target_level:
            stop = np.ones(active.size, dtype=bool)
        else:
            stop = gamma**j <= np.abs(g - y)
        values[active[stop]] = g[stop]
        levels[active[stop]] = j
        active = active[~stop]
        if active.size == 0:
            break
    return values, levels
