"""
Elasticity corrector problems on the pore cell Y and the crack cell Z.

Pore scale: incompressible correctors ``U^ij`` (with pressures ``Q^ij``) driven
by the unit strains ``J^ij``, and the dilatation corrector ``U^0`` (pressure
``P_0``) with ``div U^0 = -1`` in the solid. Their solid averages give
``C^(p)`` and ``A^(c) = (1 - m_p) J + C^(p)``.

Crack scale: correctors ``U_c^ij`` of the anisotropic problem with tensor
``A^(c)`` give ``C^(c)`` and ``A^(s) = A^(c) : ((1 - m_c) J + C^(c))``.

Displacements are trilinear on solid voxels, pressures are constant per solid
voxel. Averages ``<f>_{Y_s}`` denote integrals over the solid part of the unit
cell (not divided by its volume).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import tensor as tn
from .cellgeom import CRACK, PORE, GeometryError, UnitCell, periodic_label, porosity, \
    require_solid_percolation
from .fem import ElementKernel, assemble_matrix, assemble_rows, assemble_vector, \
    element_dofs, jump_laplacian
from .linsolve import Nullspace, SolveReport, SolverError, cg, saddle_solve

log = logging.getLogger(__name__)

PAIRS = tn.voigt_basis()  # six distinct (i, j), one-based, Voigt order


class SolidMesh:
    """Periodic trilinear mesh on the SOLID voxels of a unit cell."""

    def __init__(self, cell: UnitCell):
        n = cell.n
        self.n = n
        self.h = 1.0 / n
        solid = cell.solid
        self.elem_ijk = np.argwhere(solid)  # C order, deterministic
        ne = self.elem_ijk.shape[0]
        self.n_elements = ne
        if ne == 0:
            raise GeometryError("cell has no solid voxels")
        loc = np.array([(a, b, c) for c in (0, 1) for b in (0, 1) for a in (0, 1)])
        nodes_ijk = (self.elem_ijk[:, None, :] + loc[None, :, :]) % n
        gid = (nodes_ijk[..., 0] * n + nodes_ijk[..., 1]) * n + nodes_ijk[..., 2]
        used = np.unique(gid)
        remap = -np.ones(n**3, dtype=np.int64)
        remap[used] = np.arange(used.size)
        self.conn = remap[gid]
        self.n_nodes = used.size
        self.node_gid = used
        self.ndof = 3 * self.n_nodes
        self.edofs = element_dofs(self.conn)
        self.kernel = ElementKernel(self.h)
        # node integration weights (trilinear basis integrates to h^3/8 per element)
        self.node_weight = np.bincount(self.conn.ravel(), minlength=self.n_nodes) * self.kernel.weight
        # rigid translations per node-sharing (26-connected) solid component
        labels, count = periodic_label(solid, connectivity=3)
        comp = np.zeros(self.n_nodes, dtype=np.int64)
        comp[self.conn] = (labels[tuple(self.elem_ijk.T)] - 1)[:, None]
        self.components = count
        self.node_component = comp
        self.translations = Nullspace((3 * comp[:, None] + np.arange(3)[None, :]).ravel())
        self.divergence = assemble_rows(self.edofs, self.kernel.div, self.ndof)
        self.strain_average = self._strain_average()
        self.volume = ne * self.h**3

    def _strain_average(self) -> sp.csr_matrix:
        si = self.kernel.strain_integral  # (6, 24)
        ne = self.n_elements
        rows = np.repeat(np.arange(6), 24 * ne)
        cols = np.tile(self.edofs.ravel(), 6)
        vals = np.concatenate([np.tile(si[a], ne) for a in range(6)])
        M = sp.coo_matrix((vals, (rows, cols)), shape=(6, self.ndof)).tocsr()
        M.sum_duplicates()
        return M

    def stiffness(self, T: np.ndarray) -> sp.csr_matrix:
        return assemble_matrix(self.edofs, self.kernel.stiffness(T), self.ndof)

    def stress_load(self, sigma: np.ndarray) -> np.ndarray:
        return assemble_vector(self.edofs, self.kernel.stress_load(sigma), self.ndof)

    def normalize_mean(self, u: np.ndarray) -> np.ndarray:
        """Shift each solid component so that the integral of u over it vanishes."""
        U = u.reshape(-1, 3).copy()
        w = self.node_weight
        for c in range(self.components):
            m = self.node_component == c
            U[m] -= (w[m] @ U[m]) / w[m].sum()
        return U.ravel()

    def mean(self, u: np.ndarray) -> np.ndarray:
        """Integral of the displacement over the solid."""
        return self.node_weight @ u.reshape(-1, 3)

    def element_strains(self, u: np.ndarray) -> np.ndarray:
        """Strains at Gauss points, shape (elements, 8, 6)."""
        ue = u[self.edofs]
        return np.einsum("pai,ei->epa", self.kernel.strain, ue)

    def displacement_field(self, u: np.ndarray) -> np.ndarray:
        """Nodal displacement as an (n, n, n, 3) array (zero on fluid-only nodes)."""
        out = np.zeros((self.n**3, 3))
        out[self.node_gid] = u.reshape(-1, 3)
        return out.reshape(self.n, self.n, self.n, 3)


@dataclass
class PoreCellSolution:
    mesh: SolidMesh = field(repr=False)
    m_p: float
    U: dict  # (i, j) -> displacement dof vector
    Q: dict  # (i, j) -> element pressures
    U0: np.ndarray | None
    P0: np.ndarray | None
    strain_avg: dict  # (i, j) -> <D(U^ij)> Voigt
    pressure_avg: dict  # (i, j) -> <Q^ij>
    strain_avg0: np.ndarray
    pressure_avg0: float
    reports: dict
    tol: float

    @property
    def K(self) -> sp.csr_matrix:
        if not hasattr(self, "_K"):
            self._K = self.mesh.stiffness(tn.sym_identity4())
        return self._K


@dataclass
class CrackCellSolution:
    mesh: SolidMesh = field(repr=False)
    m_c: float
    A_c: np.ndarray
    U: dict
    strain_avg: dict
    reports: dict
    tol: float
    K: sp.csr_matrix = field(repr=False, default=None)


@dataclass
class StiffnessBundle:
    C_p_parts: tuple
    C_p: np.ndarray
    A_c: np.ndarray
    C_c: np.ndarray
    A_s: np.ndarray
    A_c_report: tn.SpdReport
    A_s_report: tn.SpdReport

    def as_dict(self) -> dict:
        return {
            "C_p": tn.to_list(self.C_p),
            "C_p_parts": [tn.to_list(c) for c in self.C_p_parts],
            "A_c": tn.to_list(self.A_c),
            "C_c": tn.to_list(self.C_c),
            "A_s": tn.to_list(self.A_s),
            "A_c_spd": self.A_c_report.as_dict(),
            "A_s_spd": self.A_s_report.as_dict(),
        }


def _check_cell(cell: UnitCell, scale: str, validate: bool):
    if cell.scale != scale:
        log.debug("cell scale tag %s used as %s", cell.scale, scale)
    if not cell.solid.any():
        raise GeometryError(f"{scale} cell has no solid phase")
    if validate:
        require_solid_percolation(cell)


def _stabilization(mesh: SolidMesh, coeff: float):
    if coeff <= 0:
        return None
    # pressure-jump penalty coeff * h^2, scaled like B K^-1 B^T ~ h^3
    return coeff * mesh.h**3 * jump_laplacian(mesh.elem_ijk, mesh.n, periodic=True)


def _pore_solve(mesh, K, f, g, tol, stab, method, label):
    U, Q, rep = saddle_solve(K, mesh.divergence, f, g, tol=tol, C=stab,
                             velocity_nullspace=mesh.translations, method=method)
    if not rep.converged:
        hint = ""
        if label == "U^0" and stab is None:
            hint = ("; the prescribed dilatation may be incompatible with an alternating "
                    "pressure mode of this voxel geometry, try solver.stabilization > 0")
        raise SolverError(f"pore-scale corrector {label} did not converge "
                          f"(primal {rep.primal_residual:.2e}, constraint "
                          f"{rep.constraint_residual:.2e}, tol {tol:.1e}){hint}")
    return mesh.normalize_mean(U), Q, rep


def solve_pore_corrector(cell: UnitCell, ij, tol: float = 1e-9, mesh: SolidMesh | None = None,
                         K=None, stabilization: float = 0.0, method: str = "minres",
                         validate: bool = True):
    """Incompressible corrector (U^ij, Q^ij) for the unit strain J^ij."""
    _check_cell(cell, PORE, validate)
    mesh = mesh or SolidMesh(cell)
    if not cell.fluid.any():
        z = SolveReport(0, 0.0, True, tol, method="trivial")
        return np.zeros(mesh.ndof), np.zeros(mesh.n_elements), z
    K = K if K is not None else mesh.stiffness(tn.sym_identity4())
    f = -mesh.stress_load(tn.jij_basis(*ij))
    g = np.zeros(mesh.n_elements)
    return _pore_solve(mesh, K, f, g, tol, _stabilization(mesh, stabilization), method,
                       f"U^{ij[0]}{ij[1]}")


def solve_pore_dilatation(cell: UnitCell, tol: float = 1e-9, mesh: SolidMesh | None = None,
                          K=None, stabilization: float = 0.0, method: str = "minres",
                          validate: bool = True):
    """Dilatation corrector (U^0, P_0) with div U^0 = -1 in every solid voxel."""
    _check_cell(cell, PORE, validate)
    if not cell.fluid.any():
        raise GeometryError("dilatation problem infeasible on all-solid cell (m_p = 0)")
    mesh = mesh or SolidMesh(cell)
    K = K if K is not None else mesh.stiffness(tn.sym_identity4())
    f = np.zeros(mesh.ndof)
    g = -np.full(mesh.n_elements, mesh.h**3)
    return _pore_solve(mesh, K, f, g, tol, _stabilization(mesh, stabilization), method, "U^0")


def solve_pore_cell(cell: UnitCell, tol: float = 1e-9, threads: int = 1,
                    stabilization: float = 0.0, method: str = "minres",
                    validate: bool = True) -> PoreCellSolution:
    """All six incompressible correctors plus the dilatation corrector."""
    _check_cell(cell, PORE, validate)
    mesh = SolidMesh(cell)
    K = mesh.stiffness(tn.sym_identity4())
    m_p = porosity(cell)

    def task(key):
        if key == "0":
            return solve_pore_dilatation(cell, tol, mesh, K, stabilization, method, False)
        return solve_pore_corrector(cell, key, tol, mesh, K, stabilization, method, False)

    # without fluid the dilatation problem is infeasible; only the (zero)
    # strain correctors are returned and A^(c) reduces to the identity tensor
    keys = list(PAIRS) + (["0"] if cell.fluid.any() else [])
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(task, keys))
    else:
        results = [task(k) for k in keys]
    h3 = mesh.h**3
    U, Q, reports, savg, pavg = {}, {}, {}, {}, {}
    for key, (u, q, rep) in zip(PAIRS, results[:6]):
        U[key], Q[key], reports[key] = u, q, rep
        savg[key] = mesh.strain_average @ u
        pavg[key] = float(h3 * q.sum())
    if len(results) == 7:
        u0, p0, rep0 = results[6]
        reports["0"] = rep0
        s0, pa0 = mesh.strain_average @ u0, float(h3 * p0.sum())
    else:
        u0 = p0 = None
        s0, pa0 = np.zeros(6), 0.0
    sol = PoreCellSolution(mesh, m_p, U, Q, u0, p0, savg, pavg, s0, pa0, reports, tol)
    sol._K = K
    return sol


def assemble_Ac(pore: PoreCellSolution, m_p: float | None = None):
    """C^(p) = C1 + C2 + C3 + C4 and A^(c) = (1 - m_p) J + C^(p)."""
    m_p = pore.m_p if m_p is None else m_p
    I = tn.identity2()
    C1 = np.zeros((6, 6))
    C3 = np.zeros((6, 6))
    for b, key in enumerate(PAIRS):
        # the sum over (i, j) and (j, i) doubles the off-diagonal outer products,
        # whose J^ij carries 1/2 in the raw Voigt slot
        C1[:, b] = pore.strain_avg[key]
        C3[:, b] = -pore.pressure_avg[key] * I
    C2 = tn.outer(pore.strain_avg0, I)
    C4 = -pore.pressure_avg0 * tn.identity_outer()
    C_p = C1 + C2 + C3 + C4
    A_c = (1.0 - m_p) * tn.sym_identity4() + C_p
    return (C1, C2, C3, C4), C_p, A_c


def _combined_strain(mesh: SolidMesh, fields: dict, zeta: np.ndarray, u0=None) -> np.ndarray:
    """Gauss-point strains of sum_ij U^ij zeta_ij (+ U^0 tr zeta) + zeta."""
    u = np.zeros(mesh.ndof)
    for b, key in enumerate(PAIRS):
        u += tn.WEIGHTS[b] * zeta[b] * fields[key]
    if u0 is not None:
        u += tn.trace(zeta) * u0
    return mesh.element_strains(u) + zeta[None, None, :]


def energy_form_Ac(pore: PoreCellSolution, zeta: np.ndarray, eta: np.ndarray | None = None) -> float:
    """Quadrature of <(D(Y_z + Y0_z) + z) : (D(Y_e + Y0_e) + e)> over the solid.

    Evaluated directly from the corrector fields, independently of the
    assembled averages and pressures.
    """
    zeta = np.asarray(zeta, dtype=float)
    eta = zeta if eta is None else np.asarray(eta, dtype=float)
    mesh = pore.mesh
    u0 = pore.U0 if pore.m_p > 0 else None
    ez = _combined_strain(mesh, pore.U, zeta, u0)
    ee = ez if eta is zeta else _combined_strain(mesh, pore.U, eta, u0)
    return float(mesh.kernel.weight * np.einsum("epa,a,epa->", ez, tn.WEIGHTS, ee))


def solve_crack_corrector(cell: UnitCell, A_c: np.ndarray, ij, tol: float = 1e-9,
                          mesh: SolidMesh | None = None, K=None, validate: bool = True,
                          max_iter: int = 20000):
    """Corrector U_c^ij of div((1 - chi_c) A^(c) : (D(U) + J^ij)) = 0 on Z."""
    if validate:
        rep = tn.spd_report(A_c)
        if not rep.spd:
            raise ValueError(f"A^(c) is not symmetric positive definite "
                             f"(defect {rep.symmetry_defect:.2e}, min_eig {rep.min_eig:.2e})")
    _check_cell(cell, CRACK, validate)
    mesh = mesh or SolidMesh(cell)
    if not cell.fluid.any():
        return np.zeros(mesh.ndof), SolveReport(0, 0.0, True, tol, method="trivial")
    K = K if K is not None else mesh.stiffness(A_c)
    b = -mesh.stress_load(tn.contract(A_c, tn.jij_basis(*ij)))
    # loads at round-off level (e.g. tractions that vanish identically on a
    # laminate) give the zero corrector
    ref = np.linalg.norm(mesh.stress_load(np.abs(A_c).max() * tn.identity2()))
    if np.linalg.norm(b) <= 1e-12 * max(ref, 1e-300):
        return np.zeros(mesh.ndof), SolveReport(0, 0.0, True, tol, method="trivial")
    u, rep = cg(K, b, tol=tol, max_iter=max_iter, nullspace=mesh.translations)
    if not rep.converged:
        raise SolverError(f"crack-scale corrector U_c^{ij[0]}{ij[1]} did not converge "
                          f"(residual {rep.residual:.2e}, tol {tol:.1e})")
    return mesh.normalize_mean(u), rep


def solve_crack_cell(cell: UnitCell, A_c: np.ndarray, tol: float = 1e-9, threads: int = 1,
                     validate: bool = True) -> CrackCellSolution:
    if validate:
        rep = tn.spd_report(A_c)
        if not rep.spd:
            raise ValueError(f"A^(c) is not symmetric positive definite "
                             f"(defect {rep.symmetry_defect:.2e}, min_eig {rep.min_eig:.2e})")
    _check_cell(cell, CRACK, validate)
    mesh = SolidMesh(cell)
    K = mesh.stiffness(A_c)

    def task(key):
        return solve_crack_corrector(cell, A_c, key, tol, mesh, K, validate=False)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(task, PAIRS))
    else:
        results = [task(k) for k in PAIRS]
    U = {k: r[0] for k, r in zip(PAIRS, results)}
    reports = {k: r[1] for k, r in zip(PAIRS, results)}
    savg = {k: mesh.strain_average @ U[k] for k in PAIRS}
    return CrackCellSolution(mesh, porosity(cell), np.asarray(A_c, dtype=float), U, savg,
                             reports, tol, K)


def assemble_As(crack: CrackCellSolution, A_c: np.ndarray | None = None,
                m_c: float | None = None):
    """C^(c) = sum <D(U_c^ij)> (x) J^ij and A^(s) = A^(c) : ((1 - m_c) J + C^(c))."""
    A_c = crack.A_c if A_c is None else A_c
    m_c = crack.m_c if m_c is None else m_c
    C_c = np.zeros((6, 6))
    for b, key in enumerate(PAIRS):
        C_c[:, b] = crack.strain_avg[key]
    A_s = tn.compose(A_c, (1.0 - m_c) * tn.sym_identity4() + C_c)
    return C_c, A_s


def energy_form_As(crack: CrackCellSolution, eta: np.ndarray) -> float:
    """Quadrature of <(A^(c) : (D(Z_eta) + eta)) : (D(Z_eta) + eta)> over the crack solid."""
    eta = np.asarray(eta, dtype=float)
    eps = _combined_strain(crack.mesh, crack.U, eta)
    M = tn.weighted_form(crack.A_c)
    return float(crack.mesh.kernel.weight * np.einsum("epa,ab,epb->", eps, M, eps))


def assemble_bundle(pore: PoreCellSolution, crack: CrackCellSolution, tol: float = 1e-7) -> StiffnessBundle:
    parts, C_p, A_c = assemble_Ac(pore)
    C_c, A_s = assemble_As(crack, A_c)
    return StiffnessBundle(parts, C_p, A_c, C_c, A_s, tn.spd_report(A_c, tol), tn.spd_report(A_s, tol))


def identity_suite(pore: PoreCellSolution, crack: CrackCellSolution | None = None,
                   A_c: np.ndarray | None = None) -> dict:
    """Residuals of the corrector energy identities.

    Each residual is divided by the product of the L2 norms of the full strain
    fields (corrector strain plus driving strain) it involves, so that values
    are comparable with the relative solver tolerance.
    """
    out = {}
    mesh = pore.mesh
    vol = mesh.volume
    K = pore.K
    # sqrt(<D(U):D(U)> + <J:J>): never zero, unlike the norm of D(U) + J
    full_norm = {}
    for key in PAIRS:
        J = tn.jij_basis(*key)
        u = pore.U[key]
        full_norm[key] = np.sqrt(float(u @ (K @ u)) + vol * tn.ddot(J, J))
    r24 = r25 = r26 = 0.0
    if pore.m_p > 0:
        u0 = pore.U0
        e00 = float(u0 @ (K @ u0))
        n0 = np.sqrt(e00)
        r24 = abs(-pore.pressure_avg0 - e00) / max(e00, 1e-300)
        for key in PAIRS:
            J = tn.jij_basis(*key)
            r25 = max(r25, abs(float(pore.U[key] @ (K @ u0))) / max(full_norm[key] * n0, 1e-300))
            r26 = max(r26, abs(pore.pressure_avg[key] + tn.ddot(pore.strain_avg0, J))
                      / max(np.sqrt(vol) * np.sqrt(tn.ddot(J, J)) * n0, 1e-300))
    r27 = 0.0
    for a in PAIRS:
        Ja = tn.jij_basis(*a)
        for b in PAIRS:
            ub = pore.U[b]
            val = float(pore.U[a] @ (K @ ub)) + tn.ddot(Ja, pore.strain_avg[b])
            r27 = max(r27, abs(val) / max(full_norm[a] * full_norm[b], 1e-300))
    out.update({"dilatation_energy": r24, "dilatation_orthogonality": r25,
                "pressure_consistency": r26, "pore_energy": r27})
    if crack is not None:
        A = crack.A_c if A_c is None else A_c
        Kc = crack.K if crack.K is not None else crack.mesh.stiffness(A)
        volc = crack.mesh.volume
        M = tn.weighted_form(A)
        cnorm = {}
        for key in PAIRS:
            J = tn.jij_basis(*key)
            u = crack.U[key]
            cnorm[key] = np.sqrt(max(float(u @ (Kc @ u)), 0.0) + volc * abs(float(J @ M @ J)))
        floor = 1e-12 * max(cnorm.values()) ** 2 + 1e-300
        r37 = 0.0
        for a in PAIRS:
            Ja = tn.jij_basis(*a)
            for b in PAIRS:
                val = float(crack.U[a] @ (Kc @ crack.U[b])) + tn.ddot(tn.contract(A, Ja), crack.strain_avg[b])
                r37 = max(r37, abs(val) / (cnorm[a] * cnorm[b] + floor))
        out["crack_energy"] = r37
    out = {k: float(v) for k, v in out.items()}
    out["max"] = max(out.values())
    return out
