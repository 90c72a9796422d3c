"""
Periodic Stokes cell problems on the crack cell and the permeability matrix.

For each axis i the problem ``-Lap V + grad Pi = e_i`` in the fluid voxels,
``div V = 0``, ``V = 0`` on the fluid/solid interface, periodic on the cell, is
discretized on a MAC grid: face-normal velocities, cell-centered pressures.
The face between voxel ``c`` and ``c + e_d`` carries an unknown iff both voxels
are FLUID. Missing normal neighbours are wall faces (zero at distance h);
missing tangential neighbours use a mirrored ghost value (wall at h/2).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .cellgeom import ConnectivityReport, GeometryError, UnitCell, connectivity, periodic_label
from .linsolve import Nullspace, SolveReport, SolverError, saddle_solve

log = logging.getLogger(__name__)


@dataclass
class MacSystem:
    """Assembled MAC operators for one fluid geometry."""

    n: int
    face_index: list  # per orientation: (n, n, n) int array, -1 for inactive faces
    cell_index: np.ndarray  # (n, n, n) int array, -1 for solid voxels
    laplacian: sp.csr_matrix
    divergence: sp.csr_matrix
    pressure_groups: np.ndarray
    offsets: tuple

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def n_faces(self) -> int:
        return self.laplacian.shape[0]

    def forcing(self, axis: int) -> np.ndarray:
        f = np.zeros(self.n_faces)
        lo, hi = self.offsets[axis], self.offsets[axis + 1]
        f[lo:hi] = 1.0
        return f

    def to_fields(self, v: np.ndarray) -> np.ndarray:
        """Unknown vector -> (3, n, n, n) face-velocity arrays (zero where inactive)."""
        out = np.zeros((3,) + (self.n,) * 3)
        for d in range(3):
            idx = self.face_index[d]
            m = idx >= 0
            out[d][m] = v[idx[m]]
        return out

    def pressure_field(self, p: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n,) * 3)
        m = self.cell_index >= 0
        out[m] = p[self.cell_index[m]]
        return out


def assemble_mac(cell: UnitCell) -> MacSystem:
    n = cell.n
    h = 1.0 / n
    fluid = cell.fluid
    face_index = []
    offsets = [0]
    for d in range(3):
        active = fluid & np.roll(fluid, -1, axis=d)
        idx = -np.ones((n, n, n), dtype=np.int64)
        idx[active] = offsets[-1] + np.arange(np.count_nonzero(active))
        face_index.append(idx)
        offsets.append(offsets[-1] + int(np.count_nonzero(active)))
    nf = offsets[-1]

    rows, cols, vals = [], [], []
    diag = np.zeros(nf)
    inv_h2 = 1.0 / (h * h)
    for d in range(3):
        idx = face_index[d]
        act = idx >= 0
        me = idx[act]
        for t in range(3):
            for s in (1, -1):
                nb = np.roll(idx, -s, axis=t)[act]
                has = nb >= 0
                rows.append(me[has])
                cols.append(nb[has])
                vals.append(np.full(np.count_nonzero(has), -inv_h2))
                # Dirichlet wall at distance h (normal) or h/2 (tangential, mirror ghost)
                w = 1.0 if t == d else 2.0
                np.add.at(diag, me[has], inv_h2)
                np.add.at(diag, me[~has], w * inv_h2)
    rows.append(np.arange(nf))
    cols.append(np.arange(nf))
    vals.append(diag)
    L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(nf, nf))

    cell_index = -np.ones((n, n, n), dtype=np.int64)
    n_cells = int(np.count_nonzero(fluid))
    cell_index[fluid] = np.arange(n_cells)
    drows, dcols, dvals = [], [], []
    for d in range(3):
        idx = face_index[d]
        act = idx >= 0
        # face (c, c+e_d) leaves c and enters c+e_d
        drows.append(cell_index[act])
        dcols.append(idx[act])
        dvals.append(np.full(np.count_nonzero(act), 1.0 / h))
        up = np.roll(cell_index, -1, axis=d)[act]
        drows.append(up)
        dcols.append(idx[act])
        dvals.append(np.full(np.count_nonzero(act), -1.0 / h))
    D = sp.csr_matrix((np.concatenate(dvals), (np.concatenate(drows), np.concatenate(dcols))),
                      shape=(n_cells, nf))
    # sign: (D V)_c = (V_out - V_in)/h with V_out the face (c, c+e_d)
    labels, _ = periodic_label(fluid)
    groups = labels[fluid] - 1
    return MacSystem(n, face_index, cell_index, L, D, groups, tuple(offsets))


@dataclass
class AxisSolution:
    axis: int
    velocity: np.ndarray  # (3, n, n, n) face velocities
    pressure: np.ndarray  # (n, n, n), zero in solid voxels
    mean_velocity: np.ndarray  # whole-cell average of the three components
    max_divergence: float
    report: SolveReport
    unknowns: np.ndarray = field(repr=False, default=None)
    pressure_unknowns: np.ndarray = field(repr=False, default=None)


@dataclass
class StokesCellSolution:
    axes: list
    system: MacSystem = field(repr=False, default=None)

    @property
    def reports(self) -> list:
        return [a.report for a in self.axes]


@dataclass
class PermeabilityResult:
    B: np.ndarray
    symmetry_defect: float
    min_eig: float
    connectivity: ConnectivityReport
    gram: np.ndarray
    gram_defect: float
    reports: list
    solution: StokesCellSolution | None = field(repr=False, default=None)

    def as_dict(self) -> dict:
        return {
            "B_c": [float(x) for x in self.B.ravel()],
            "symmetry_defect": self.symmetry_defect,
            "min_eig": self.min_eig,
            "gram_defect": self.gram_defect,
            "connectivity": self.connectivity.as_dict(),
            "solves": [r.as_dict() for r in self.reports],
        }


def solve_stokes_cell(cell: UnitCell, axis: int, tol: float = 1e-9,
                      system: MacSystem | None = None, method: str = "minres",
                      max_iter: int = 50000) -> AxisSolution:
    """Velocity and pressure correctors for the unit body force along ``axis`` (0-based)."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    if not cell.fluid.any():
        raise GeometryError("Stokes cell problem needs a nonempty fluid phase")
    sysm = system or assemble_mac(cell)
    f = sysm.forcing(axis)
    g = np.zeros(sysm.divergence.shape[0])
    v, p, rep = saddle_solve(sysm.laplacian, sysm.divergence, f, g, tol=tol,
                             pressure_nullspace=Nullspace(sysm.pressure_groups),
                             method=method, max_iter=max_iter)
    if not rep.converged:
        raise SolverError(f"Stokes cell solve for axis {'xyz'[axis]} did not converge "
                          f"(residual {rep.residual:.3e}, tol {tol:.1e})")
    vel = sysm.to_fields(v)
    div = sysm.divergence @ v
    return AxisSolution(
        axis=axis,
        velocity=vel,
        pressure=sysm.pressure_field(p),
        mean_velocity=vel.reshape(3, -1).mean(axis=1),
        max_divergence=float(np.max(np.abs(div))) if div.size else 0.0,
        report=rep,
        unknowns=v,
        pressure_unknowns=p,
    )


def compute_Bc(cell: UnitCell, tol: float = 1e-9, threads: int = 1,
               method: str = "minres") -> PermeabilityResult:
    """Permeability matrix with column i equal to the cell average of V^i.

    No viscosity factor is folded in; the Darcy law applies 1/mu_1 itself.
    An empty fluid phase yields B = 0 without solving.
    """
    conn = connectivity(cell)
    if not cell.fluid.any():
        z = np.zeros((3, 3))
        return PermeabilityResult(z, 0.0, 0.0, conn, z.copy(), 0.0, [], None)
    sysm = assemble_mac(cell)

    def run(i):
        try:
            return solve_stokes_cell(cell, i, tol, system=sysm, method=method)
        except SolverError as exc:
            raise SolverError(f"crack-scale Stokes, axis {'xyz'[i]}: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, 3)) as pool:
            sols = list(pool.map(run, range(3)))
    else:
        sols = [run(i) for i in range(3)]
    B = np.column_stack([s.mean_velocity for s in sols])
    h3 = sysm.h**3
    U = np.column_stack([s.unknowns for s in sols])
    gram = h3 * (U.T @ (sysm.laplacian @ U))
    # floor keeps the relative defects meaningful when B vanishes (isolated fluid)
    scale = max(float(np.max(np.abs(B))), 1e-12)
    sym = float(np.max(np.abs(B - B.T))) / scale
    gdef = float(np.max(np.abs(gram - B))) / scale
    min_eig = float(np.linalg.eigvalsh(0.5 * (B + B.T))[0])
    return PermeabilityResult(B, sym, min_eig, conn, gram, gdef,
                              [s.report for s in sols], StokesCellSolution(sols, sysm))


def poiseuille_slab(phi: float) -> float:
    """Mean flux of -V'' = 1 on (0, phi) with V(0) = V(phi) = 0, per unit cell."""
    return phi**3 / 12.0
