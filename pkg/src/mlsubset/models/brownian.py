"""Minimum of a Brownian path on dyadic grids, generated by a truncated KL series."""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.stats import norm

from ..hierarchy import AccuracySchedule, LimitStateModel


def kl_basis(kl_terms: int, t: np.ndarray) -> np.ndarray:
    """Matrix ``(kl_terms, len(t))`` of ``sqrt(2)/pi * sin((i - 1/2) pi t) / (i - 1/2)``.

    Multiplying standard-normal coordinates by this matrix gives the path,
    i.e. the coefficient ``xi_i = theta_i / (i - 1/2)`` is folded in.
    """
    k = np.arange(1, kl_terms + 1) - 0.5
    return (math.sqrt(2.0) / math.pi) * np.sin(np.pi * np.outer(k, t)) / k[:, None]


class BrownianModel(LimitStateModel):
    """``G_l(theta) = min_{t in T_l} B_t(theta) + barrier_depth``, ``T_l = {i / 2**l}``.

    The cost of one level-``l`` evaluation is the number of grid points,
    ``2**l + 1``.  Selective refinement starts at ``coarsest_level``.
    """

    def __init__(self, kl_terms=256, max_level=12, barrier=-4.0, gamma=2.0**-0.5, q=2.0, coarsest_level=4):
        super().__init__(kl_terms, AccuracySchedule(gamma, q, max_level))
        self.kl_terms = int(kl_terms)
        self.barrier = float(barrier)
        self.coarsest_level = int(coarsest_level)
        self._bases = {}

    def grid(self, level: int) -> np.ndarray:
        return np.arange(2**level + 1) / 2**level

    def basis(self, level: int) -> np.ndarray:
        if level not in self._bases:
            self._bases[level] = kl_basis(self.kl_terms, self.grid(level))
        return self._bases[level]

    def path(self, theta, level: int) -> np.ndarray:
        return self._as_batch(theta) @ self.basis(level)

    def level_cost(self, level):
        return float(2**level + 1)

    def _evaluate(self, theta, level):
        return (theta @ self.basis(level)).min(axis=1) - self.barrier

    def truncation_report(self) -> dict:
        """Share of the path variance kept by the truncated series.

        At ``t = 1`` and averaged over ``[0, 1]`` the share is the same number.
        """
        k = np.arange(1, self.kl_terms + 1) - 0.5
        kept = float(np.sum(2.0 / (np.pi * k) ** 2))
        return {"kl_terms": self.kl_terms, "variance_kept": kept}

    @staticmethod
    def reference_probability(barrier=-4.0) -> float:
        """``P(min_{[0,1]} B <= barrier) = 2 Phi(barrier)`` by the reflection principle."""
        return float(2.0 * norm.cdf(barrier))
