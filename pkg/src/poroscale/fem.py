"""
Trilinear hexahedral elements on uniform voxel grids.

Local node ``(a, b, c)`` in {0, 1}^3 has index ``a + 2 b + 4 c``; element dofs
are ordered node-major (``3 * node + component``). Strains are raw Voigt
vectors (11, 22, 33, 23, 13, 12) with tensor (not engineering) shears.
Integration uses the 2x2x2 Gauss rule, exact for every form assembled here.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import WEIGHTS

LOCAL_NODES = np.array([(a, b, c) for c in (0, 1) for b in (0, 1) for a in (0, 1)])
_G = 0.5 / np.sqrt(3.0)
GAUSS_POINTS = np.array([(0.5 + sx * _G, 0.5 + sy * _G, 0.5 + sz * _G)
                         for sz in (-1, 1) for sy in (-1, 1) for sx in (-1, 1)])


def shape_values(xi: np.ndarray) -> np.ndarray:
    """Trilinear shape functions at reference points ``xi`` in [0, 1]^3, shape (p, 8)."""
    xi = np.atleast_2d(xi)
    out = np.ones((xi.shape[0], 8))
    for k in range(3):
        t = xi[:, k][:, None]
        out *= np.where(LOCAL_NODES[:, k][None, :] == 1, t, 1.0 - t)
    return out


def shape_gradients(xi: np.ndarray, h: float) -> np.ndarray:
    """Physical gradients, shape (p, 8, 3), on a cube of side h."""
    xi = np.atleast_2d(xi)
    p = xi.shape[0]
    out = np.ones((p, 8, 3))
    for k in range(3):
        for m in range(3):
            t = xi[:, m][:, None]
            if m == k:
                f = np.where(LOCAL_NODES[:, m][None, :] == 1, 1.0, -1.0) / h
                f = np.broadcast_to(f, (p, 8))
            else:
                f = np.where(LOCAL_NODES[:, m][None, :] == 1, t, 1.0 - t)
            out[:, :, k] *= f
    return out


def strain_matrices(h: float, points: np.ndarray = GAUSS_POINTS) -> np.ndarray:
    """Raw-Voigt strain operators, shape (p, 6, 24)."""
    dN = shape_gradients(points, h)
    p = dN.shape[0]
    Bm = np.zeros((p, 6, 24))
    for a in range(8):
        gx, gy, gz = dN[:, a, 0], dN[:, a, 1], dN[:, a, 2]
        c = 3 * a
        Bm[:, 0, c] = gx
        Bm[:, 1, c + 1] = gy
        Bm[:, 2, c + 2] = gz
        Bm[:, 3, c + 1] = 0.5 * gz
        Bm[:, 3, c + 2] = 0.5 * gy
        Bm[:, 4, c] = 0.5 * gz
        Bm[:, 4, c + 2] = 0.5 * gx
        Bm[:, 5, c] = 0.5 * gy
        Bm[:, 5, c + 1] = 0.5 * gx
    return Bm


def gradient_matrices(h: float, points: np.ndarray = GAUSS_POINTS) -> np.ndarray:
    """Full displacement-gradient operators, shape (p, 9, 24), row 3*i + j = du_i/dx_j."""
    dN = shape_gradients(points, h)
    p = dN.shape[0]
    G = np.zeros((p, 9, 24))
    for a in range(8):
        for i in range(3):
            for j in range(3):
                G[:, 3 * i + j, 3 * a + i] = dN[:, a, j]
    return G


class ElementKernel:
    """Element-level arrays for a voxel of side h."""

    def __init__(self, h: float):
        self.h = h
        self.strain = strain_matrices(h)
        self.weight = h**3 / 8.0
        self.div = self.weight * self.strain[:, :3, :].sum(axis=(0, 1))
        self.strain_integral = self.weight * self.strain.sum(axis=0)  # (6, 24)

    def stiffness(self, T: np.ndarray) -> np.ndarray:
        """Element matrix of (T : eps(u)) : eps(v)."""
        M = WEIGHTS[:, None] * np.asarray(T) * WEIGHTS[None, :]
        return self.weight * np.einsum("pai,ab,pbj->ij", self.strain, M, self.strain)

    def stress_load(self, sigma: np.ndarray) -> np.ndarray:
        """Element vector of sigma : eps(v) for a constant Voigt stress sigma."""
        return self.strain_integral.T @ (WEIGHTS * np.asarray(sigma))


def element_dofs(conn: np.ndarray) -> np.ndarray:
    """Node connectivity (e, 8) -> dof connectivity (e, 24)."""
    return (3 * conn[:, :, None] + np.arange(3)[None, None, :]).reshape(conn.shape[0], 24)


def assemble_matrix(edofs: np.ndarray, ke: np.ndarray, ndof: int,
                    scale: np.ndarray | None = None) -> sp.csr_matrix:
    """Assemble identical (optionally scaled) element matrices into a CSR matrix."""
    ne = edofs.shape[0]
    rows = np.repeat(edofs, 24, axis=1).ravel()
    cols = np.tile(edofs, (1, 24)).ravel()
    vals = np.broadcast_to(ke.ravel(), (ne, 576))
    if scale is not None:
        vals = vals * scale[:, None]
    M = sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(ndof, ndof)).tocsr()
    M.sum_duplicates()
    return M


def assemble_rows(edofs: np.ndarray, row: np.ndarray, ndof: int) -> sp.csr_matrix:
    """One row per element holding the same 24-vector (e.g. the divergence row)."""
    ne = edofs.shape[0]
    rows = np.repeat(np.arange(ne), 24)
    vals = np.tile(row, ne)
    M = sp.coo_matrix((vals, (rows, edofs.ravel())), shape=(ne, ndof)).tocsr()
    M.sum_duplicates()
    return M


def assemble_vector(edofs: np.ndarray, fe: np.ndarray, ndof: int,
                    scale: np.ndarray | None = None) -> np.ndarray:
    vals = np.broadcast_to(fe, edofs.shape) if fe.ndim == 1 else fe
    if scale is not None:
        vals = vals * scale[:, None]
    return np.bincount(edofs.ravel(), weights=np.asarray(vals).ravel(), minlength=ndof)


def jump_laplacian(elem_ijk: np.ndarray, n: int, periodic: bool) -> sp.csr_matrix:
    """Graph Laplacian over face-adjacent elements (pressure-jump stabilization)."""
    ne = elem_ijk.shape[0]
    lookup = -np.ones((n, n, n), dtype=np.int64)
    lookup[tuple(elem_ijk.T)] = np.arange(ne)
    rows, cols = [], []
    for d in range(3):
        nb = elem_ijk.copy()
        nb[:, d] += 1
        if periodic:
            nb[:, d] %= n
            ok = np.ones(ne, dtype=bool)
        else:
            ok = nb[:, d] < n
        j = -np.ones(ne, dtype=np.int64)
        j[ok] = lookup[tuple(nb[ok].T)]
        has = j >= 0
        rows.append(np.arange(ne)[has])
        cols.append(j[has])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    W = sp.coo_matrix((np.ones(r.size), (r, c)), shape=(ne, ne))
    W = (W + W.T).tocsr()
    return (sp.diags(np.asarray(W.sum(axis=1)).ravel()) - W).tocsr()
