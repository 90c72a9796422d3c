"""
Homogenized macroscopic solvers on the unit cube.

Displacements are trilinear on an N^3 hexahedral grid with u = 0 on the
boundary, pressures are constant per element. Case I is the stationary
incompressible anisotropic system

    lambda0 div(A_s : D(u)) - grad(q)/m = rho_hat F,   div u = 0,

stabilized with a small pressure-jump penalty. Case II couples it to the Darcy
law v_c = B_c (rho_f F - grad(q)/m) / mu1 through the mixture continuity
equation div(v_s) + div(v_c) = 0, integrated with implicit Euler. The rigid
problem drops the skeleton: div(B_c grad q)/m = rho_f div(B_c F).

The Darcy operator is a two-point flux on interior faces for the diagonal of
B_c plus a node-gradient form for its off-diagonal part. Both pieces are exact
for quadratic pressures, and their sum is symmetric positive semidefinite.
Zero normal flux on the boundary is the natural condition.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import tensor as tn
from .fem import ElementKernel, GAUSS_POINTS, assemble_matrix, assemble_rows, element_dofs, \
    gradient_matrices, jump_laplacian, shape_values
from .linsolve import Nullspace, SolveReport, SolverError, cg, saddle_solve
from .upscale import CASE_I, CASE_II, EffectiveCoefficients

log = logging.getLogger(__name__)


# -- body forces ----------------------------------------------------------------

@dataclass(frozen=True)
class BodyForce:
    """Force density F(x, t) = g(t) * profile(x); ``ramp`` > 0 gives g = min(t / ramp, 1)."""

    kind: str
    profile: Callable = field(repr=False, compare=False)
    ramp: float = 0.0
    potential: Callable | None = field(default=None, repr=False, compare=False)
    params: tuple = ()

    def factor(self, t: float) -> float:
        if self.ramp > 0:
            return min(max(t, 0.0) / self.ramp, 1.0)
        return 1.0

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        g = self.factor(t)
        if g == 0.0:
            return np.zeros_like(x)
        return g * np.asarray(self.profile(x), dtype=float).reshape(x.shape)

    @property
    def is_zero(self) -> bool:
        return self.kind == "none"


def zero_force() -> BodyForce:
    return BodyForce("none", lambda x: np.zeros_like(x))


def constant_force(vector, ramp: float = 0.0) -> BodyForce:
    v = np.asarray(vector, dtype=float)
    if v.shape != (3,):
        raise ValueError(f"constant force needs three components, got {vector!r}")
    return BodyForce("constant", lambda x: np.broadcast_to(v, x.shape).copy(), ramp,
                     lambda x: np.atleast_2d(x) @ v, tuple(v))


def rotational_force(ramp: float = 0.0) -> BodyForce:
    """F = (-x2, x1, 0): divergence free and not a gradient."""
    def f(x):
        out = np.zeros_like(x)
        out[:, 0] = -x[:, 1]
        out[:, 1] = x[:, 0]
        return out
    return BodyForce("rotational", f, ramp)


def gradient_force(grad0, hessian=None, ramp: float = 0.0) -> BodyForce:
    """Conservative F = grad(Phi) for Phi = grad0 . x + x^T H x / 2."""
    g0 = np.asarray(grad0, dtype=float)
    H = np.zeros((3, 3)) if hessian is None else np.asarray(hessian, dtype=float)
    H = 0.5 * (H + H.T)
    return BodyForce("gradient", lambda x: g0[None, :] + x @ H, ramp,
                     lambda x: np.atleast_2d(x) @ g0 + 0.5 * np.einsum("pi,ij,pj->p", np.atleast_2d(x), H, np.atleast_2d(x)),
                     tuple(g0) + tuple(H.ravel()))


# -- mesh -------------------------------------------------------------------------

def gauss_rule(order: int):
    """Tensor Gauss-Legendre points on [0, 1]^3 (x fastest) and weights summing to 1."""
    t, w = np.polynomial.legendre.leggauss(order)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    pts = np.array([(t[a], t[b], t[c]) for c in range(order) for b in range(order)
                    for a in range(order)])
    wts = np.array([w[a] * w[b] * w[c] for c in range(order) for b in range(order)
                    for a in range(order)])
    return pts, wts


class MacroMesh:
    """Uniform N^3 hexahedral grid on the unit cube with u = 0 on the boundary."""

    def __init__(self, N: int):
        if N < 4:
            raise ValueError(f"macro grid needs N >= 4, got {N}")
        self.N = N
        self.h = 1.0 / N
        M = N + 1
        self.elem_ijk = np.argwhere(np.ones((N, N, N), dtype=bool))
        loc = np.array([(a, b, c) for c in (0, 1) for b in (0, 1) for a in (0, 1)])
        nijk = self.elem_ijk[:, None, :] + loc[None, :, :]
        self.conn = nijk[..., 0] + M * (nijk[..., 1] + M * nijk[..., 2])
        self.n_nodes = M**3
        self.n_elements = N**3
        g = np.arange(M)
        I, J, K = np.meshgrid(g, g, g, indexing="ij")
        # node id = i + M (j + M k); build coordinates in that order
        ids = (I + M * (J + M * K)).ravel()
        coords = np.zeros((self.n_nodes, 3))
        coords[ids] = np.column_stack([I.ravel(), J.ravel(), K.ravel()]) * self.h
        self.node_coords = coords
        interior = np.all((coords > 0.5 * self.h) & (coords < 1 - 0.5 * self.h), axis=1)
        self.interior_nodes = np.flatnonzero(interior)
        self.boundary_nodes = np.flatnonzero(~interior)
        self.free = (3 * self.interior_nodes[:, None] + np.arange(3)).ravel()
        self.ndof_full = 3 * self.n_nodes
        self.edofs = element_dofs(self.conn)
        self.kernel = ElementKernel(self.h)
        self.centers = (self.elem_ijk + 0.5) * self.h
        self.divergence = assemble_rows(self.edofs, self.kernel.div, self.ndof_full)[:, self.free].tocsr()

    def cell_index(self, i, j, k):
        N = self.N
        return (np.asarray(i) * N + np.asarray(j)) * N + np.asarray(k)

    def stiffness(self, T: np.ndarray) -> sp.csr_matrix:
        K = assemble_matrix(self.edofs, self.kernel.stiffness(T), self.ndof_full)
        return K[self.free][:, self.free].tocsr()

    def expand(self, u_free: np.ndarray) -> np.ndarray:
        """Free dofs -> (n_nodes, 3) nodal displacement with boundary zeros."""
        full = np.zeros(self.ndof_full)
        full[self.free] = u_free
        return full.reshape(-1, 3)

    def quadrature_points(self, order: int = 2):
        pts, wts = (GAUSS_POINTS, np.full(8, 0.125)) if order == 2 else gauss_rule(order)
        x = (self.elem_ijk[:, None, :] + pts[None, :, :]) * self.h
        return pts, wts * self.h**3, x

    def load_vector(self, force: Callable, t: float, order: int = 2) -> np.ndarray:
        """Free-dof vector of integral(F . phi) with F given as force(x, t)."""
        pts, wts, x = self.quadrature_points(order)
        Nv = shape_values(pts)  # (p, 8)
        F = force(x.reshape(-1, 3), t).reshape(x.shape)  # (e, p, 3)
        fe = np.einsum("p,pa,epi->eai", wts, Nv, F).reshape(self.n_elements, 24)
        full = np.bincount(self.edofs.ravel(), weights=fe.ravel(), minlength=self.ndof_full)
        return full[self.free]

    def evaluate(self, u_free: np.ndarray, order: int = 2):
        """Displacement values and gradients at quadrature points."""
        pts, wts, x = self.quadrature_points(order)
        ue = self.expand(u_free).ravel()[self.edofs]  # (e, 24)
        Nv = shape_values(pts)
        vals = np.einsum("pa,eai->epi", Nv, ue.reshape(-1, 8, 3))
        G = gradient_matrices(self.h, pts)
        grads = np.einsum("pkj,ej->epk", G, ue)
        return x, wts, vals, grads

    def l2_norm(self, u_free: np.ndarray) -> float:
        _, w, vals, _ = self.evaluate(u_free)
        return float(np.sqrt(np.einsum("p,epi,epi->", w, vals, vals)))

    def grad_norm(self, u_free: np.ndarray) -> float:
        _, w, _, grads = self.evaluate(u_free)
        return float(np.sqrt(np.einsum("p,epk,epk->", w, grads, grads)))

    def cell_norm(self, q: np.ndarray) -> float:
        return float(np.sqrt(self.h**3 * np.sum(np.asarray(q) ** 2)))

    def pressure_stabilization(self) -> sp.csr_matrix:
        return jump_laplacian(self.elem_ijk, self.N, periodic=False)


# -- Darcy operator -----------------------------------------------------------------

class DarcyOperator:
    """Discrete -div(B grad q) on cells with zero normal flux, and its load forms."""

    def __init__(self, mesh: MacroMesh, B: np.ndarray):
        self.mesh = mesh
        B = np.asarray(B, dtype=float)
        self.B = 0.5 * (B + B.T)
        N, h = mesh.N, mesh.h
        nc = mesh.n_elements
        self.faces = []  # per axis: (lower cell, upper cell, face centers)
        rows, cols, vals = [], [], []
        for k in range(3):
            ijk = mesh.elem_ijk[mesh.elem_ijk[:, k] < N - 1]
            up = ijk.copy()
            up[:, k] += 1
            c0 = mesh.cell_index(*ijk.T)
            c1 = mesh.cell_index(*up.T)
            xf = (ijk + 0.5) * h
            xf[:, k] += 0.5 * h
            self.faces.append((c0, c1, xf))
            w = self.B[k, k] * h
            rows += [c0, c1, c0, c1]
            cols += [c0, c1, c1, c0]
            vals += [np.full(c0.size, w), np.full(c0.size, w), np.full(c0.size, -w), np.full(c0.size, -w)]
        L = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(nc, nc)).tocsr()
        self.offdiag = self.B - np.diag(np.diag(self.B))
        self.node_grad = None
        if np.any(self.offdiag != 0.0):
            self.node_grad, self.node_x = self._node_gradient()
            G = self.node_grad
            for k in range(3):
                for l in range(3):
                    if self.offdiag[k, l] != 0.0:
                        L = L + self.offdiag[k, l] * h**3 * (G[k].T @ G[l])
        L.sum_duplicates()
        self.L = L.tocsr()
        self.nullspace = Nullspace(np.zeros(nc, dtype=np.int64))

    def _node_gradient(self):
        """Gradients at interior nodes from the eight surrounding cells."""
        mesh = self.mesh
        N, h = mesh.N, mesh.h
        g = np.arange(1, N)
        I, J, K = np.meshgrid(g, g, g, indexing="ij")
        nodes = np.column_stack([I.ravel(), J.ravel(), K.ravel()])
        nv = nodes.shape[0]
        G = []
        for d in range(3):
            rows, cols, vals = [], [], []
            for c in (0, 1):
                for b in (0, 1):
                    for a in (0, 1):
                        off = np.array([a, b, c])
                        cell = nodes - 1 + off
                        rows.append(np.arange(nv))
                        cols.append(mesh.cell_index(*cell.T))
                        vals.append(np.full(nv, (2 * off[d] - 1) / (4 * h)))
            G.append(sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                   shape=(nv, mesh.n_elements)).tocsr())
        return G, nodes * h

    def load(self, force: Callable, t: float) -> np.ndarray:
        """b with b(r) = integral(B F . grad r), discretized consistently with L."""
        mesh = self.mesh
        h = mesh.h
        b = np.zeros(mesh.n_elements)
        for k, (c0, c1, xf) in enumerate(self.faces):
            flux = self.B[k, k] * force(xf, t)[:, k] * h**2
            np.add.at(b, c0, -flux)
            np.add.at(b, c1, flux)
        if self.node_grad is not None:
            Fv = force(self.node_x, t) @ self.offdiag.T
            for k in range(3):
                b += h**3 * (self.node_grad[k].T @ Fv[:, k])
        return b

    def cell_gradient(self, q: np.ndarray) -> np.ndarray:
        """Central differences at cell centers, second-order one-sided next to the boundary."""
        N, h = self.mesh.N, self.mesh.h
        Q = np.asarray(q).reshape(N, N, N)
        return np.stack([np.gradient(Q, h, axis=d, edge_order=2) for d in range(3)], axis=-1).reshape(-1, 3)

    def velocity(self, q: np.ndarray, force: Callable, t: float, m: float, mu1: float,
                 rho_f: float):
        """Normal crack velocities on interior faces, their cell average and divergence.

        Boundary faces carry zero normal velocity. The tangential pressure
        gradient entering off-diagonal permeabilities is averaged from the
        two adjacent cell-centered gradients.
        """
        h = self.mesh.h
        nc = self.mesh.n_elements
        cgrad = self.cell_gradient(q) if self.node_grad is not None else None
        faces = []
        cell = np.zeros((nc, 3))
        div = np.zeros(nc)
        for k, (c0, c1, xf) in enumerate(self.faces):
            drive = self.B[k, k] * (q[c1] - q[c0]) / h
            if cgrad is not None:
                drive = drive + 0.5 * (cgrad[c0] + cgrad[c1]) @ self.offdiag[k]
            vn = (rho_f * (force(xf, t) @ self.B[k]) - drive / m) / mu1
            faces.append(vn)
            np.add.at(cell[:, k], c0, 0.5 * vn)
            np.add.at(cell[:, k], c1, 0.5 * vn)
            np.add.at(div, c0, vn / h)
            np.add.at(div, c1, -vn / h)
        return faces, cell, div


# -- configuration and state ---------------------------------------------------------

@dataclass
class MacroConfig:
    coeffs: EffectiveCoefficients
    N: int = 16
    dt: float = 0.1
    T: float = 1.0
    lambda0: float | None = None
    mu1: float | None = None
    force: BodyForce = field(default_factory=zero_force)
    tol: float = 1e-8
    stabilization: float = 0.1
    saddle: str = "minres"
    threads: int = 1

    def __post_init__(self):
        if self.lambda0 is None:
            self.lambda0 = self.coeffs.lambda0
        if self.mu1 is None:
            self.mu1 = self.coeffs.mu1

    def validate(self):
        if self.N < 4:
            raise ValueError(f"macro.n must be >= 4, got {self.N}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"macro.dt must be positive, got {self.dt}")
        if not (self.T >= self.dt):
            raise ValueError(f"macro.t_end must be >= macro.dt, got {self.T} < {self.dt}")
        if not (0 < self.lambda0 < math.inf):
            raise ValueError(f"lambda0 must be finite and positive, got {self.lambda0}")
        if not (self.mu1 > 0):
            raise ValueError(f"mu1 must be positive or inf, got {self.mu1}")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass
class MacroState:
    t: float
    u: np.ndarray  # free nodal dofs
    q: np.ndarray  # element pressures, zero mean
    v_c: np.ndarray | None = None  # (elements, 3) cell-centered crack velocity
    v_s: np.ndarray | None = None  # free nodal dofs, (u^{n+1} - u^n) / dt
    continuity_residual: float = 0.0
    report: SolveReport | None = None

    def nodal_u(self, mesh: MacroMesh) -> np.ndarray:
        return mesh.expand(self.u)


@dataclass
class MacroSeries:
    case: str
    mesh: MacroMesh = field(repr=False)
    states: list
    energy: dict = field(default_factory=dict)

    def rows(self) -> list:
        out = []
        mesh = self.mesh
        for s in self.states:
            vc = 0.0 if s.v_c is None else mesh.cell_norm(s.v_c)
            out.append({
                "t": s.t,
                "u_norm": mesh.l2_norm(s.u),
                "grad_u_norm": mesh.grad_norm(s.u),
                "q_norm": mesh.cell_norm(s.q),
                "vc_norm": vc,
                "continuity_residual": s.continuity_residual,
            })
        return out


TIME_SERIES_COLUMNS = ("t", "u_norm", "grad_u_norm", "q_norm", "vc_norm", "continuity_residual")
RIGID_LIMIT_COLUMNS = ("lambda0", "grad_u_norm", "q_error", "v_error")


# -- shared assembly -------------------------------------------------------------------

def _stiffness_scale(A_s: np.ndarray) -> float:
    return float(np.trace(tn.weighted_form(A_s))) / 6.0


class _Assembly:
    def __init__(self, cfg: MacroConfig, mesh: MacroMesh | None = None):
        c = cfg.coeffs
        rep = tn.spd_report(c.A_s)
        if not rep.spd:
            raise ValueError(f"A_s is not symmetric positive definite "
                             f"(defect {rep.symmetry_defect:.2e}, min_eig {rep.min_eig:.2e})")
        self.mesh = mesh or MacroMesh(cfg.N)
        self.m = c.m
        if not self.m > 0:
            raise ValueError("macro problem needs a positive liquid fraction m")
        self.K = cfg.lambda0 * self.mesh.stiffness(c.A_s)
        self.Bs = (self.mesh.divergence / self.m).tocsr()
        self.pressure_ns = Nullspace(np.zeros(self.mesh.n_elements, dtype=np.int64))
        self.cfg = cfg

    def momentum_rhs(self, t: float, order: int = 2) -> np.ndarray:
        cfg = self.cfg
        if cfg.force.is_zero:
            return np.zeros(self.mesh.free.size)
        return -cfg.coeffs.rho_hat * self.mesh.load_vector(cfg.force, t, order)


def _continuity_residual(Bs, C, u, q, g) -> float:
    r = g - (Bs @ u + (C @ q if C is not None else 0.0))
    r = r - r.mean()
    scale = max(np.abs(Bs @ u).max(initial=0.0),
                np.abs(C @ q).max(initial=0.0) if C is not None else 0.0,
                np.abs(g).max(initial=0.0))
    return float(np.abs(r).max() / scale) if scale > 0 else 0.0


def _check(rep, what: str):
    if not rep.converged:
        raise SolverError(f"{what} did not converge (primal {rep.primal_residual:.2e}, "
                          f"constraint {rep.constraint_residual:.2e}, tol {rep.tol:.1e})")


# -- Case I ------------------------------------------------------------------------------

class Case1Solver:
    """Stationary anisotropic incompressible system at a sequence of load times."""

    def __init__(self, cfg: MacroConfig, mesh: MacroMesh | None = None):
        cfg.validate()
        self.asm = _Assembly(cfg, mesh)
        mesh = self.asm.mesh
        a = _stiffness_scale(cfg.coeffs.A_s)
        alpha = cfg.stabilization
        self.C = None
        if alpha > 0:
            coef = alpha * mesh.h**3 / (self.asm.m**2 * cfg.lambda0 * a)
            self.C = (coef * mesh.pressure_stabilization()).tocsr()

    def solve(self, t: float, f: np.ndarray | None = None) -> MacroState:
        asm = self.asm
        cfg = asm.cfg
        f = asm.momentum_rhs(t) if f is None else f
        g = np.zeros(asm.mesh.n_elements)
        u, q, rep = saddle_solve(asm.K, asm.Bs, f, g, tol=cfg.tol, C=self.C,
                                 pressure_nullspace=asm.pressure_ns, method=cfg.saddle)
        _check(rep, f"Case I solve at t={t:g}")
        res = _continuity_residual(asm.Bs, self.C, u, q, g)
        return MacroState(t, u, q, None, None, res, rep)


def solve_case1(cfg: MacroConfig, t: float, mesh: MacroMesh | None = None) -> MacroState:
    """One stationary Case I solve with the load F(., t)."""
    if cfg.coeffs.regime != CASE_I:
        raise ValueError(f"solve_case1 needs regime CASE_I, coefficients say {cfg.coeffs.regime}")
    return Case1Solver(cfg, mesh).solve(t)


def run_case1(cfg: MacroConfig) -> MacroSeries:
    """Case I at t = 0, dt, ..., T; the skeleton velocity comes from differencing."""
    if cfg.coeffs.regime != CASE_I:
        raise ValueError(f"run_case1 needs regime CASE_I, coefficients say {cfg.coeffs.regime}")
    solver = Case1Solver(cfg)
    mesh = solver.asm.mesh
    states = []
    prev = None
    for n in range(cfg.steps + 1):
        s = solver.solve(n * cfg.dt)
        s.v_s = np.zeros_like(s.u) if prev is None else (s.u - prev.u) / cfg.dt
        # cracks move with the skeleton: v_c = m_c v_s, reported per cell
        s.v_c = cfg.coeffs.m_c * _cell_average(mesh, s.v_s)
        states.append(s)
        prev = s
    return MacroSeries(CASE_I, mesh, states)


def _cell_average(mesh: MacroMesh, u_free: np.ndarray) -> np.ndarray:
    return mesh.expand(u_free)[mesh.conn].mean(axis=1)


# -- manufactured solution -----------------------------------------------------------------

def _sin2_derivs(s: np.ndarray, order: int) -> np.ndarray:
    """d^order/ds^order of sin^2(pi s)."""
    p = np.pi
    if order == 0:
        return np.sin(p * s) ** 2
    if order == 1:
        return p * np.sin(2 * p * s)
    if order == 2:
        return 2 * p**2 * np.cos(2 * p * s)
    if order == 3:
        return -4 * p**3 * np.sin(2 * p * s)
    raise ValueError(order)


# u* = (d psi/dy, -d psi/dx, 0), psi = f(x) f(y) f(z): (coefficient, derivative orders)
_U_STAR = ((1.0, (0, 1, 0)), (-1.0, (1, 0, 0)), (0.0, (0, 0, 0)))


def manufactured_u(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    out = np.zeros_like(x)
    for k, (c, a) in enumerate(_U_STAR):
        if c:
            out[:, k] = c * np.prod([_sin2_derivs(x[:, d], a[d]) for d in range(3)], axis=0)
    return out


def manufactured_q(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.prod(np.cos(np.pi * x), axis=1)


def manufactured_source(coeffs: EffectiveCoefficients, lambda0: float) -> Callable:
    """rho_hat F such that (u*, q*) solve the Case I system."""
    A = np.asarray(coeffs.A_s)
    m = coeffs.m
    full = np.zeros((3, 3, 3, 3))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                for l in range(3):
                    full[i, j, k, l] = A[tn.voigt_index(i, j), tn.voigt_index(k, l)]

    def source(x):
        x = np.atleast_2d(x)
        # second derivatives d_j d_l u_k
        d2 = np.zeros((x.shape[0], 3, 3, 3))
        for k, (c, a) in enumerate(_U_STAR):
            if not c:
                continue
            for j in range(3):
                for l in range(3):
                    orders = list(a)
                    orders[j] += 1
                    orders[l] += 1
                    d2[:, k, j, l] = c * np.prod([_sin2_derivs(x[:, d], orders[d]) for d in range(3)], axis=0)
        div_sigma = np.einsum("ijkl,pkjl->pi", full, d2)
        p = np.pi
        cx, cy, cz = (np.cos(p * x[:, d]) for d in range(3))
        sx, sy, sz = (np.sin(p * x[:, d]) for d in range(3))
        grad_q = np.column_stack([-p * sx * cy * cz, -p * cx * sy * cz, -p * cx * cy * sz])
        return lambda0 * div_sigma - grad_q / m

    return source


def manufactured_force(coeffs: EffectiveCoefficients, lambda0: float) -> BodyForce:
    src = manufactured_source(coeffs, lambda0)
    return BodyForce("manufactured", lambda x: src(x) / coeffs.rho_hat)


@dataclass
class ManufacturedResult:
    N: int
    u_error: float
    q_error: float
    state: MacroState = field(repr=False)


def manufactured_case1(cfg: MacroConfig, N: int) -> ManufacturedResult:
    """Case I solve against (u*, q*) with exact-source loading; L2 errors at 27 points."""
    src = manufactured_source(cfg.coeffs, cfg.lambda0)
    cfg = dataclasses.replace(cfg, N=N, force=BodyForce("manufactured", lambda x: src(x) / cfg.coeffs.rho_hat))
    solver = Case1Solver(cfg)
    mesh = solver.asm.mesh
    f = -mesh.load_vector(lambda x, t: src(x), 0.0, order=3)
    state = solver.solve(0.0, f)
    x, w, vals, _ = mesh.evaluate(state.u, order=3)
    err = vals - manufactured_u(x.reshape(-1, 3)).reshape(vals.shape)
    u_err = float(np.sqrt(np.einsum("p,epi,epi->", w, err, err)))
    qx = manufactured_q(x.reshape(-1, 3)).reshape(x.shape[:2])
    q_err = float(np.sqrt(np.einsum("p,ep->", w, (qx - state.q[:, None]) ** 2)))
    return ManufacturedResult(N, u_err, q_err, state)


def convergence_orders(errors, Ns) -> list:
    return [float(np.log(errors[i] / errors[i + 1]) / np.log(Ns[i + 1] / Ns[i]))
            for i in range(len(errors) - 1)]


# -- Case II ---------------------------------------------------------------------------------

def _require_finite_mu(cfg: MacroConfig, what: str):
    if math.isinf(cfg.mu1):
        raise ValueError(f"{what} needs a finite mu1")


def run_case2(cfg: MacroConfig, keep_states: bool = True) -> MacroSeries:
    """Implicit Euler for the coupled elasticity / Darcy / continuity system.

    Each step solves the symmetric system

        [ K         -B^T/m         ] [u]   [ -rho_hat F_h                             ]
        [ -B/m      -dt L/(m^2 mu1)] [q] = [ -(B u^n + dt rho_f b_F / mu1) / m        ]

    with L the Darcy operator and b_F its load. The energy balance
    E^N/2 + sum(dt q.L q/(m^2 mu1) + dU.K dU/2) = work is accumulated on the way.
    """
    c = cfg.coeffs
    if c.regime != CASE_II:
        raise ValueError(f"run_case2 needs regime CASE_II, coefficients say {c.regime}")
    _require_finite_mu(cfg, "Case II")
    cfg.validate()
    asm = _Assembly(cfg)
    mesh = asm.mesh
    darcy = DarcyOperator(mesh, c.B_c)
    m, mu1, dt = asm.m, cfg.mu1, cfg.dt
    C = (dt / (m * m * mu1) * darcy.L).tocsr()
    B = mesh.divergence
    u = np.zeros(mesh.free.size)
    q = np.zeros(mesh.n_elements)
    states = [MacroState(0.0, u.copy(), q.copy(), np.zeros((mesh.n_elements, 3)),
                         np.zeros_like(u), 0.0, None)]
    work = dissipation = numerical = 0.0
    for n in range(1, cfg.steps + 1):
        t = n * dt
        f = asm.momentum_rhs(t)
        bF = darcy.load(cfg.force, t) if not cfg.force.is_zero else np.zeros(mesh.n_elements)
        g = (B @ u + dt * c.rho_f / mu1 * bF) / m
        u_new, q_new, rep = saddle_solve(asm.K, asm.Bs, f, g, tol=cfg.tol, C=C,
                                         pressure_nullspace=asm.pressure_ns, method=cfg.saddle)
        _check(rep, f"Case II step {n} (t={t:g})")
        res = _continuity_residual(asm.Bs, C, u_new, q_new, g)
        du = u_new - u
        work += float(f @ du) + dt * c.rho_f / (m * mu1) * float(q_new @ bF)
        dissipation += dt / (m * m * mu1) * float(q_new @ (darcy.L @ q_new))
        numerical += 0.5 * float(du @ (asm.K @ du))
        u, q = u_new, q_new
        _, vcell, _ = darcy.velocity(q, cfg.force, t, m, mu1, c.rho_f)
        st = MacroState(t, u.copy(), q.copy(), vcell, du / dt, res, rep)
        if keep_states or n == cfg.steps:
            states.append(st)
    elastic = 0.5 * float(u @ (asm.K @ u))
    lhs = elastic + dissipation + numerical
    scale = max(abs(work), abs(lhs), 1e-300)
    energy = {"elastic": elastic, "darcy_dissipation": dissipation,
              "numerical_dissipation": numerical, "work": work,
              "balance_defect": abs(lhs - work) / scale if (lhs or work) else 0.0}
    return MacroSeries(CASE_II, mesh, states, energy)


# -- rigid Darcy limit ---------------------------------------------------------------------

@dataclass
class DarcyState:
    t: float
    q: np.ndarray
    v_c: np.ndarray  # (elements, 3)
    face_velocity: list
    divergence: np.ndarray
    report: SolveReport


def solve_rigid_darcy(cfg: MacroConfig, t: float, mesh: MacroMesh | None = None) -> DarcyState:
    """Pressure of div(B grad q)/m = rho_f div(B F), zero flux, zero mean; then v_c."""
    c = cfg.coeffs
    _require_finite_mu(cfg, "rigid Darcy problem")
    B = 0.5 * (np.asarray(c.B_c) + np.asarray(c.B_c).T)
    ev = np.linalg.eigvalsh(B)
    if ev[0] <= 1e-12 * max(abs(ev[-1]), 1e-300) or ev[-1] <= 0:
        raise ValueError("rigid limit undefined: zero permeability (B_c is not positive definite)")
    mesh = mesh or MacroMesh(cfg.N)
    darcy = DarcyOperator(mesh, B)
    m = c.m
    b = c.rho_f * darcy.load(cfg.force, t) if not cfg.force.is_zero else np.zeros(mesh.n_elements)
    q, rep = cg(darcy.L / m, b, tol=cfg.tol, max_iter=20 * mesh.n_elements,
                nullspace=darcy.nullspace)
    if not rep.converged:
        raise SolverError(f"rigid Darcy pressure solve did not converge (residual {rep.residual:.2e})")
    faces, vcell, div = darcy.velocity(q, cfg.force, t, m, cfg.mu1, c.rho_f)
    return DarcyState(t, q, vcell, faces, div, rep)


def rigid_limit_study(cfg: MacroConfig, lambdas, threads: int = 1) -> list:
    """Case II at each lambda0 against the rigid Darcy solution at the final time."""
    lambdas = [float(v) for v in lambdas]
    if len(lambdas) < 3:
        raise ValueError(f"insufficient λ₀ samples: need at least 3, got {len(lambdas)}")
    if any(b <= a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError(f"λ₀ samples must be strictly ascending, got {lambdas}")
    if lambdas[0] <= 0 or lambdas[-1] / lambdas[0] < 1e4 * (1 - 1e-12):
        raise ValueError("λ₀ samples must be positive and span at least 4 decades")
    if cfg.coeffs.regime != CASE_II:
        raise ValueError(f"rigid-limit study needs regime CASE_II, coefficients say {cfg.coeffs.regime}")
    mesh = MacroMesh(cfg.N)
    rigid = solve_rigid_darcy(cfg, cfg.steps * cfg.dt, mesh)

    def one(lam):
        series = run_case2(dataclasses.replace(cfg, lambda0=lam), keep_states=False)
        last = series.states[-1]
        return {
            "lambda0": lam,
            "grad_u_norm": series.mesh.grad_norm(last.u),
            "q_error": mesh.cell_norm(last.q - rigid.q),
            "v_error": mesh.cell_norm(last.v_c - rigid.v_c),
        }

    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(lambdas))) as pool:
            return list(pool.map(one, lambdas))
    return [one(v) for v in lambdas]
