"""Log-normal Darcy flow on the unit square.

The log-permeability is a truncated cosine series whose coefficients are the
standard-normal parameters; the limit state is ``y_crit`` minus the mean
pressure over a small box near the top edge.  Accuracy level ``k`` is the
P1 solution on a uniform mesh with ``2**(k+2)`` cells per side.
"""
from __future__ import annotations

import math

import numpy as np

from ..hierarchy import AccuracySchedule, LevelledValue, LimitStateModel
from .fem import DarcySolver, UniformMesh, box_weights

DEFAULT_BOX = (0.4, 0.9, 0.6, 0.99)


def kl_modes(max_index: int) -> np.ndarray:
    """All index pairs ``(i, j)`` with ``0 <= i, j <= max_index``, row-major."""
    i, j = np.meshgrid(np.arange(max_index + 1), np.arange(max_index + 1), indexing="ij")
    return np.column_stack([i.ravel(), j.ravel()])


def kl_eigenvalues(modes: np.ndarray, tau: float = 0.1, alpha: float = 1.0) -> np.ndarray:
    """``(pi**2 (i**2 + j**2) + tau**2) ** -alpha``."""
    k2 = (modes**2).sum(axis=1)
    return (math.pi**2 * k2 + tau**2) ** (-alpha)


def kl_eigenfunctions(modes: np.ndarray, points: np.ndarray) -> np.ndarray:
    """L2-normalised ``cos(i pi x) cos(j pi y)`` at ``points``; shape ``(n_modes, n_points)``."""
    points = np.atleast_2d(points)
    ci = np.where(modes[:, 0] == 0, 1.0, math.sqrt(2.0))
    cj = np.where(modes[:, 1] == 0, 1.0, math.sqrt(2.0))
    cx = np.cos(np.pi * np.outer(modes[:, 0], points[:, 0]))
    cy = np.cos(np.pi * np.outer(modes[:, 1], points[:, 1]))
    return (ci * cj)[:, None] * cx * cy


class LogNormalField:
    """Truncated expansion ``log A(x) = sum theta_m sqrt(lambda_m) e_m(x)``."""

    def __init__(self, max_index: int = 16, tau: float = 0.1, alpha: float = 1.0):
        self.max_index = int(max_index)
        self.modes = kl_modes(max_index)
        self.eigenvalues = kl_eigenvalues(self.modes, tau, alpha)
        self.tau, self.alpha = tau, alpha

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def design(self, points: np.ndarray) -> np.ndarray:
        """Matrix ``M`` with ``theta @ M = log A`` at ``points``."""
        return np.sqrt(self.eigenvalues)[:, None] * kl_eigenfunctions(self.modes, points)

    def pointwise_variance(self, points: np.ndarray, skip_constant: bool = False) -> np.ndarray:
        terms = self.eigenvalues[:, None] * kl_eigenfunctions(self.modes, points) ** 2
        if skip_constant:
            terms = terms[np.any(self.modes != 0, axis=1)]
        return terms.sum(axis=0)


def kl_log_field(theta, points, max_index: int = 16, tau: float = 0.1, alpha: float = 1.0) -> np.ndarray:
    """Permeability ``exp(log A)`` at ``points`` for one or several parameter vectors."""
    field = LogNormalField(max_index, tau, alpha)
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] < field.n_modes:
        raise ValueError(f"need at least {field.n_modes} coefficients, got {theta.shape[-1]}")
    return np.exp(theta[..., : field.n_modes] @ field.design(np.atleast_2d(points)))


def hierarchical_error_estimate(g_fine, g_coarse, gamma: float, constant: float | None = None) -> np.ndarray:
    """``C |G_{k+1} - G_k|`` with ``C = 1 / (1 - gamma)`` unless given: the tail of a geometric error series."""
    c = 1.0 / (1.0 - gamma) if constant is None else float(constant)
    return c * np.abs(np.asarray(g_fine) - np.asarray(g_coarse))


class DarcyModel(LimitStateModel):
    """``G_k(theta) = y_crit - mean of u_k over the box``, ``u_k`` the P1 pressure on mesh ``k``.

    Parameters
    ----------
    max_index : int
        Modes ``(i, j)`` with ``i, j <= max_index`` are retained; ``dim`` is
        their count.
    level_costs : sequence of float
        Work units per solve on mesh levels ``1..len(level_costs)``.
    base_cells : int
        Cells per side on mesh level 1; each level doubles it.
    error_constant : float, optional
        Factor in the two-level error estimate; ``1 / (1 - gamma)`` by default.
    """

    def __init__(self, max_index=16, tau=0.1, alpha=1.0, y_crit=0.92, gamma=0.25,
                 level_costs=(1.0, 16.0, 256.0, 4096.0), base_cells=8, region=DEFAULT_BOX,
                 error_constant=None):
        max_level = len(level_costs)
        q = math.log(level_costs[-1] / level_costs[0]) / (-(max_level - 1) * math.log(gamma)) if max_level > 1 else 0.0
        self.field = LogNormalField(max_index, tau, alpha)
        super().__init__(self.field.n_modes, AccuracySchedule(gamma, q, max_level))
        self.y_crit = float(y_crit)
        if error_constant is not None and not error_constant > 0:
            raise ValueError("error_constant must be positive")
        self.error_constant = error_constant
        self.level_costs = tuple(float(c) for c in level_costs)
        self.base_cells = int(base_cells)
        self.region = tuple(region)
        self._area = (region[2] - region[0]) * (region[3] - region[1])
        self._levels = {}

    def mesh_cells(self, level: int) -> int:
        return self.base_cells * 2 ** (level - 1)

    def _level_data(self, level: int):
        if level not in self._levels:
            mesh = UniformMesh.unit_square(self.mesh_cells(level))
            solver = DarcySolver(mesh)
            design = self.field.design(mesh.centroids)
            weights = box_weights(mesh, self.region) / self._area
            self._levels[level] = (solver, design, weights)
        return self._levels[level]

    def level_cost(self, level):
        return self.level_costs[level - 1]

    def solve(self, theta, level: int) -> np.ndarray:
        """Nodal pressures for a single parameter vector."""
        self._check_level(level)
        solver, design, _ = self._level_data(level)
        log_a = self._as_batch(theta)[0] @ design
        return solver.solve(np.exp(log_a - log_a.max()))

    def _evaluate(self, theta, level):
        solver, design, weights = self._level_data(level)
        log_a = theta @ design
        log_a -= log_a.max(axis=1, keepdims=True)  # the problem is invariant under scaling A
        out = np.empty(theta.shape[0])
        for r in range(theta.shape[0]):
            out[r] = self.y_crit - weights @ solver.solve(np.exp(log_a[r]))
        return out

    def truncation_report(self) -> dict:
        """Pointwise variance of ``log A`` at the centre of the box, against a field with twice the modes per axis.

        The constant mode is left out: rescaling ``A`` does not change the solution.
        """
        centre = np.array([[(self.region[0] + self.region[2]) / 2, (self.region[1] + self.region[3]) / 2]])
        kept = float(self.field.pointwise_variance(centre, skip_constant=True)[0])
        wider = LogNormalField(2 * self.field.max_index, self.field.tau, self.field.alpha)
        ref = float(wider.pointwise_variance(centre, skip_constant=True)[0])
        return {"max_index": self.field.max_index, "n_modes": self.field.n_modes,
                "log_variance_at_box_centre": kept, "log_variance_doubled_index": ref,
                "variance_ratio": kept / ref}

    def hierarchical_error_estimate(self, theta, level: int) -> np.ndarray:
        """Estimated ``|G - G_level|`` from the next finer mesh."""
        if level + 1 > self.max_level:
            raise ValueError("no finer mesh available for the error estimate")
        return hierarchical_error_estimate(self.evaluate(theta, level + 1), self.evaluate(theta, level),
                                           self.schedule.gamma, self.error_constant)


def pde_limit_state(model: DarcyModel, theta, level: int, y: float | None = None) -> LevelledValue:
    """Refine meshes until the two-level estimate certifies ``gamma**level``.

    With a threshold ``y`` the loop also stops once the estimate is below
    ``|G_k - y|``.  If the finest mesh is reached without a certificate the
    finest value is returned with ``certified=False``.
    """
    model._check_level(level)
    gamma = model.schedule.gamma
    target = gamma**level
    cost = model.level_cost(1)
    g = float(model.evaluate(theta, 1)[0])
    for k in range(1, model.max_level):
        g_next = float(model.evaluate(theta, k + 1)[0])
        cost += model.level_cost(k + 1)
        est = float(hierarchical_error_estimate(g_next, g, gamma, model.error_constant))
        if est <= target or (y is not None and est <= abs(g - y)):
            return LevelledValue(g, k, est, cost)
        g = g_next
    return LevelledValue(g, model.max_level, target, cost, certified=False)
