"""Gaussian toy problem: ``G(theta) = theta_1 - barrier`` perturbed by ``+-gamma**l``."""
from __future__ import annotations

import numpy as np

from ..hierarchy import AccuracySchedule, LimitStateModel
from ..rng import hash_rows


class ToyModel(LimitStateModel):
    """``G_l = G + kappa * gamma**l`` with ``kappa`` uniform on ``{-1, +1}``.

    ``kappa`` is a hash of ``(seed, theta, level)``, so evaluating the same
    sample twice at the same level gives the same answer.  Failure ``theta_1 <=
    barrier`` is written as ``G <= 0``.
    """

    def __init__(self, gamma=0.5, q=2.0, max_level=20, barrier=0.0, dim=1, seed=0, fixed_kappa=None):
        super().__init__(dim, AccuracySchedule(gamma, q, max_level))
        self.barrier = float(barrier)
        self.seed = int(seed)
        if fixed_kappa not in (None, -1, 1):
            raise ValueError("fixed_kappa must be None, -1 or +1")
        self.fixed_kappa = fixed_kappa

    def kappa(self, theta: np.ndarray, level: int) -> np.ndarray:
        if self.fixed_kappa is not None:
            return np.full(theta.shape[0], float(self.fixed_kappa))
        h = hash_rows(theta, self.seed, level)
        return np.where(h >> np.uint64(63), 1.0, -1.0)

    def exact(self, theta):
        theta = self._as_batch(theta)
        return theta[:, 0] - self.barrier

    def _evaluate(self, theta, level):
        return theta[:, 0] - self.barrier + self.kappa(theta, level) * self.schedule.gamma**level


class ConstantModel(LimitStateModel):
    """Limit state identically equal to ``value`` (degenerate test model)."""

    def __init__(self, value: float, dim=1, gamma=0.5, q=2.0, max_level=5):
        super().__init__(dim, AccuracySchedule(gamma, q, max_level))
        self.value = float(value)

    def exact(self, theta):
        return np.full(self._as_batch(theta).shape[0], self.value)

    def _evaluate(self, theta, level):
        return np.full(theta.shape[0], self.value)
