"""P1 finite elements for ``-div(A grad u) = 0`` on the unit square.

Dirichlet data ``u = 0`` on the left edge and ``u = 1`` on the right edge,
natural (zero-flux) conditions on top and bottom.  The coefficient is
piecewise constant per element.  Everything that does not depend on the
coefficient (sparsity pattern, local gradient matrices, QoI weights) is
built once per mesh so a solve is a couple of ``bincount`` calls and a
banded Cholesky factorisation (row-major node numbering keeps the
bandwidth at ``n``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solveh_banded
from shapely.geometry import Polygon, box


@dataclass(frozen=True)
class UniformMesh:
    """``n x n`` squares of the unit square, each cut into two right triangles."""

    n: int
    nodes: np.ndarray      # (n_nodes, 2)
    triangles: np.ndarray  # (n_elem, 3) counter-clockwise

    @classmethod
    def unit_square(cls, n: int) -> "UniformMesh":
        xs = np.arange(n + 1) / n
        X, Y = np.meshgrid(xs, xs, indexing="xy")
        nodes = np.column_stack([X.ravel(), Y.ravel()])
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
        i, j = i.ravel(), j.ravel()
        v00 = j * (n + 1) + i
        v10 = v00 + 1
        v01 = v00 + (n + 1)
        v11 = v01 + 1
        tris = np.vstack([np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])])
        return cls(n, nodes, tris)

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def boundary_nodes(self, side: str) -> np.ndarray:
        x, y = self.nodes[:, 0], self.nodes[:, 1]
        tol = 0.5 / self.n
        sel = {"left": x < tol, "right": x > 1 - tol, "bottom": y < tol, "top": y > 1 - tol}[side]
        return np.flatnonzero(sel)


def local_stiffness(mesh: UniformMesh) -> np.ndarray:
    """Per-element ``area * grad(phi_a) . grad(phi_b)``, shape ``(n_elem, 3, 3)``."""
    p = mesh.nodes[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    # gradients of the barycentric coordinates
    g1 = np.column_stack([d2[:, 1], -d2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-d1[:, 1], d1[:, 0]]) / det[:, None]
    g0 = -g1 - g2
    g = np.stack([g0, g1, g2], axis=1)
    area = 0.5 * np.abs(det)
    return area[:, None, None] * np.einsum("eak,ebk->eab", g, g)


def box_weights(mesh: UniformMesh, region: tuple[float, float, float, float]) -> np.ndarray:
    """Weights ``w`` with ``w @ u = integral of the P1 interpolant of u over region``.

    Each element is clipped against the box exactly; a linear function
    integrates to area times its value at the centroid of the clipped piece.
    """
    x0, y0, x1, y1 = region
    b = box(x0, y0, x1, y1)
    w = np.zeros(len(mesh.nodes))
    c = mesh.centroids
    near = np.flatnonzero((c[:, 0] > x0 - 2 * mesh.h) & (c[:, 0] < x1 + 2 * mesh.h)
                          & (c[:, 1] > y0 - 2 * mesh.h) & (c[:, 1] < y1 + 2 * mesh.h))
    for e in near:
        tri = mesh.nodes[mesh.triangles[e]]
        piece = Polygon(tri).intersection(b)
        if piece.area <= 0:
            continue
        cx, cy = piece.centroid.x, piece.centroid.y
        T = np.array([[tri[1, 0] - tri[0, 0], tri[2, 0] - tri[0, 0]],
                      [tri[1, 1] - tri[0, 1], tri[2, 1] - tri[0, 1]]])
        l12 = np.linalg.solve(T, [cx - tri[0, 0], cy - tri[0, 1]])
        lam = np.array([1 - l12.sum(), l12[0], l12[1]])
        w[mesh.triangles[e]] += piece.area * lam
    return w


class DarcySolver:
    """Reusable P1 solver on a fixed mesh for element-wise constant coefficients."""

    def __init__(self, mesh: UniformMesh):
        self.mesh = mesh
        n_nodes = len(mesh.nodes)
        left = mesh.boundary_nodes("left")
        right = mesh.boundary_nodes("right")
        self.dirichlet = np.concatenate([left, right])
        self.u_dirichlet = np.zeros(n_nodes)
        self.u_dirichlet[right] = 1.0
        is_free = np.ones(n_nodes, dtype=bool)
        is_free[self.dirichlet] = False
        self.free = np.flatnonzero(is_free)
        free_index = np.full(n_nodes, -1)
        free_index[self.free] = np.arange(self.free.size)

        loc = local_stiffness(mesh)
        tri = mesh.triangles
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        self._elem = np.repeat(np.arange(len(tri)), 9)
        self._loc = loc.ravel()
        self._rows, self._cols = rows, cols

        # free-free block: fixed CSR pattern, entry -> slot map
        ff = is_free[rows] & is_free[cols]
        r, c = free_index[rows[ff]], free_index[cols[ff]]
        nf = self.free.size
        key = r.astype(np.int64) * nf + c
        ukey, slot = np.unique(key, return_inverse=True)
        self._ff = np.flatnonzero(ff)
        self._ff_slot = slot
        self._nnz = ukey.size
        ur, uc = ukey // nf, ukey % nf
        self._indices = uc.astype(np.int32)
        self._indptr = np.searchsorted(ur, np.arange(nf + 1)).astype(np.int32)
        self._nf = nf
        upper = ur <= uc
        self._band_slots = np.flatnonzero(upper)
        self._bw = int((uc - ur).max())
        self._band_pos = (self._bw + ur[upper] - uc[upper], uc[upper])

        # free rows coupled to Dirichlet columns move to the right-hand side
        fd = is_free[rows] & ~is_free[cols]
        self._fd = np.flatnonzero(fd)
        self._fd_row = free_index[rows[fd]]
        self._fd_val = self.u_dirichlet[cols[fd]]

    def entry_values(self, coeff: np.ndarray) -> np.ndarray:
        return coeff[self._elem] * self._loc

    def full_matrix(self, coeff: np.ndarray) -> sp.csr_matrix:
        n = len(self.mesh.nodes)
        return sp.csr_matrix((self.entry_values(coeff), (self._rows, self._cols)), shape=(n, n))

    def solve(self, coeff: np.ndarray) -> np.ndarray:
        """Nodal values of the discrete solution for element coefficients ``coeff``."""
        coeff = np.asarray(coeff, dtype=float)
        if coeff.shape != (len(self.mesh.triangles),):
            raise ValueError("one coefficient per element expected")
        if not np.all(coeff > 0):
            raise ValueError("coefficient must be strictly positive")
        vals = self.entry_values(coeff / coeff.max())
        data = np.bincount(self._ff_slot, weights=vals[self._ff], minlength=self._nnz)
        ab = np.zeros((self._bw + 1, self._nf))
        ab[self._band_pos] = data[self._band_slots]
        rhs = -np.bincount(self._fd_row, weights=vals[self._fd] * self._fd_val, minlength=self._nf)
        u = self.u_dirichlet.copy()
        u[self.free] = solveh_banded(ab, rhs, check_finite=False)
        return u

    def free_matrix(self, coeff: np.ndarray) -> sp.csr_matrix:
        vals = self.entry_values(coeff)
        data = np.bincount(self._ff_slot, weights=vals[self._ff], minlength=self._nnz)
        return sp.csr_matrix((data, self._indices, self._indptr), shape=(self._nf, self._nf))

    def boundary_flux(self, coeff: np.ndarray, u: np.ndarray) -> tuple[float, float]:
        """Discrete total flux ``(left, right)`` from the residual of the full system."""
        r = self.full_matrix(coeff) @ u
        return float(r[self.mesh.boundary_nodes("left")].sum()), float(r[self.mesh.boundary_nodes("right")].sum())
