"""
Matrix-free Krylov solvers: CG for SPD systems and a saddle-point driver.

Nullspaces are spanned by group-constant vectors (constant pressures on each
fluid component, rigid translations on each solid component). They are
described by an integer label per unknown and removed by subtracting group
means after every operator application.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Krylov breakdown, non-finite values or an incompatible right-hand side."""


@dataclass
class LinearOperator:
    dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    spd: bool = False
    diagonal: np.ndarray | None = None

    def __matmul__(self, x):
        return self.apply(x)

    @classmethod
    def from_matrix(cls, M, spd: bool = False) -> "LinearOperator":
        if sp.issparse(M):
            M = M.tocsr()
            diag = M.diagonal()
        else:
            M = np.asarray(M, dtype=float)
            diag = np.diag(M).copy() if M.shape[0] == M.shape[1] else None
        return cls(M.shape[1], lambda x: M @ x, spd, diag)


def as_operator(A) -> LinearOperator:
    return A if isinstance(A, LinearOperator) else LinearOperator.from_matrix(A)


class Nullspace:
    """Span of group-indicator vectors; label -1 marks unconstrained entries."""

    def __init__(self, labels):
        labels = np.asarray(labels, dtype=np.int64)
        self.labels = labels
        mask = labels >= 0
        self._idx = np.nonzero(mask)[0]
        self._lab = labels[mask]
        self._k = int(self._lab.max()) + 1 if self._lab.size else 0
        self._count = np.bincount(self._lab, minlength=self._k).astype(float)

    @property
    def dim(self) -> int:
        return int(np.count_nonzero(self._count))

    def group_means(self, x: np.ndarray) -> np.ndarray:
        s = np.bincount(self._lab, weights=x[self._idx], minlength=self._k)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self._count > 0, s / np.maximum(self._count, 1), 0.0)

    def project(self, x: np.ndarray) -> np.ndarray:
        if self._k == 0:
            return x
        y = np.array(x, dtype=float, copy=True)
        y[self._idx] -= self.group_means(x)[self._lab]
        return y

    def defect(self, x: np.ndarray) -> float:
        if self._k == 0:
            return 0.0
        return float(np.max(np.abs(self.group_means(x))))


def no_nullspace(dim: int) -> Nullspace:
    return Nullspace(-np.ones(dim, dtype=np.int64))


@dataclass
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    tol: float
    history: list = field(default_factory=list, repr=False)
    method: str = "cg"

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "iterations": int(self.iterations),
            "residual": float(self.residual),
            "converged": bool(self.converged),
            "tol": float(self.tol),
        }


def _check_finite(v: np.ndarray, what: str):
    if not np.all(np.isfinite(v)):
        raise SolverError(f"non-finite values encountered in {what}")


def cg(A, b, tol: float = 1e-9, max_iter: int = 10000, x0=None,
       nullspace: Nullspace | None = None, precondition: bool = True,
       atol: float = 0.0):
    """Preconditioned conjugate gradients.

    Stops when ``||b - A x|| <= max(tol * ||b||, atol)``. With a nullspace the
    right-hand side, the iterates and every operator output are projected.
    Jacobi preconditioning is used when the operator exposes its diagonal.
    Returns ``(x, SolveReport)``; ``history`` holds relative residual norms.
    """
    A = as_operator(A)
    ns = nullspace or no_nullspace(A.dim)
    b = ns.project(np.asarray(b, dtype=float))
    _check_finite(b, "cg right-hand side")
    bnorm = float(np.linalg.norm(b))
    x = np.zeros(A.dim) if x0 is None else ns.project(np.asarray(x0, dtype=float))
    if bnorm == 0.0 and atol == 0.0:
        return np.zeros(A.dim), SolveReport(0, 0.0, True, tol, [0.0])
    target = max(tol * bnorm, atol)
    scale = bnorm if bnorm > 0 else 1.0

    if precondition and A.diagonal is not None:
        d = np.asarray(A.diagonal, dtype=float)
        inv = np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 1.0)
        prec = lambda r: ns.project(inv * r)  # noqa: E731
    else:
        prec = lambda r: r  # noqa: E731

    r = b - ns.project(A @ x)
    rnorm = float(np.linalg.norm(r))
    history = [rnorm / scale]
    if rnorm <= target:
        return x, SolveReport(0, rnorm / scale, True, tol, history)
    z = prec(r)
    p = z.copy()
    rz = float(r @ z)
    it = 0
    for it in range(1, max_iter + 1):
        Ap = ns.project(A @ p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp):
            raise SolverError(f"non-finite curvature at cg iteration {it}")
        if pAp <= 0.0:
            raise SolverError(f"operator not positive definite (p.Ap={pAp:.3e}) at cg iteration {it}")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rnorm = float(np.linalg.norm(r))
        history.append(rnorm / scale)
        if rnorm <= target:
            break
        z = prec(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    # recompute the true residual to guard against drift
    r_true = b - ns.project(A @ x)
    res = float(np.linalg.norm(r_true))
    _check_finite(x, "cg solution")
    return x, SolveReport(it, res / scale, res <= 1.01 * target, tol, history)


def minres(A, b, tol: float = 1e-9, max_iter: int = 20000, x0=None,
           precond: Callable | None = None, project: Callable | None = None):
    """Preconditioned MINRES for symmetric (possibly indefinite) systems.

    ``precond`` applies an SPD approximation of ``A^-1``; ``project`` removes
    the nullspace. Stops on the preconditioned residual estimate; the caller
    is expected to verify the true residual.
    """
    A = as_operator(A)
    P = project or (lambda v: v)
    M = precond or (lambda v: v)
    b = P(np.asarray(b, dtype=float))
    x = np.zeros(A.dim) if x0 is None else P(np.asarray(x0, dtype=float))
    v = b - P(A @ x)
    z = P(M(v))
    gamma = float(np.sqrt(max(z @ v, 0.0)))
    if gamma == 0.0:
        return x, 0
    eta0 = gamma
    eta = gamma
    v_old = np.zeros_like(v)
    w = np.zeros_like(v)
    w_old = np.zeros_like(v)
    gamma_old = 1.0
    c, c_old, s, s_old = 1.0, 1.0, 0.0, 0.0
    it = 0
    for it in range(1, max_iter + 1):
        z = z / gamma
        Az = P(A @ z)
        delta = float(Az @ z)
        v_new = Az - (delta / gamma) * v - (gamma / gamma_old) * v_old
        z_new = P(M(v_new))
        gamma_new = float(np.sqrt(max(z_new @ v_new, 0.0)))
        alpha0 = c * delta - c_old * s * gamma
        alpha1 = float(np.hypot(alpha0, gamma_new))
        alpha2 = s * delta + c_old * c * gamma
        alpha3 = s_old * gamma
        if alpha1 == 0.0:
            raise SolverError(f"minres breakdown at iteration {it}")
        c_old, s_old = c, s
        c, s = alpha0 / alpha1, gamma_new / alpha1
        w_new = (z - alpha3 * w_old - alpha2 * w) / alpha1
        x = x + (c * eta) * w_new
        eta = -s * eta
        w_old, w = w, w_new
        v_old, v = v, v_new
        gamma_old, gamma = gamma, gamma_new
        z = z_new
        if not np.isfinite(eta):
            raise SolverError(f"non-finite residual estimate at minres iteration {it}")
        if abs(eta) <= tol * eta0 or gamma == 0.0:
            break
    return x, it


@dataclass
class SaddleReport(SolveReport):
    primal_residual: float = 0.0
    constraint_residual: float = 0.0
    restarts: int = 0

    def as_dict(self) -> dict:
        d = super().as_dict()
        d.update(primal_residual=float(self.primal_residual),
                 constraint_residual=float(self.constraint_residual),
                 restarts=int(self.restarts))
        return d


def saddle_solve(A, B, f, g, tol: float = 1e-9, C=None,
                 velocity_nullspace: Nullspace | None = None,
                 pressure_nullspace: Nullspace | None = None,
                 method: str = "minres", max_iter: int = 20000,
                 max_restarts: int = 8, schur_diag=None, compat_tol: float = 1e-6):
    """Solve ``A x - B^T p = f``, ``-B x - C p = -g`` (i.e. ``B x + C p = g``).

    ``C`` is an optional symmetric positive semidefinite pressure block (zero
    for exact constraints). ``A`` is SPD on the complement of the velocity
    nullspace and on ker(B). Both block residuals are driven below ``tol``
    relative to the norm of their own right-hand side (or of the other block
    when their own is zero). ``p`` is returned with zero group means.

    ``method`` is ``"minres"`` (block-diagonal preconditioned, default) or
    ``"uzawa"`` (CG on the pressure Schur complement with inner CG solves;
    requires ``C is None``).
    """
    A = as_operator(A)
    Bm = B.tocsr() if sp.issparse(B) else sp.csr_matrix(np.asarray(B, dtype=float))
    nu, npr = A.dim, Bm.shape[0]
    vns = velocity_nullspace or no_nullspace(nu)
    pns = pressure_nullspace or no_nullspace(npr)
    f = vns.project(np.asarray(f, dtype=float))
    g = np.asarray(g, dtype=float)
    Cm = None if C is None else (C.tocsr() if sp.issparse(C) else sp.csr_matrix(C))

    # compatibility: g must be orthogonal to the pressure nullspace
    g_proj = pns.project(g)
    gnorm = float(np.linalg.norm(g))
    if gnorm > 0 and np.linalg.norm(g - g_proj) > compat_tol * gnorm:
        raise SolverError(
            "incompatible constraint right-hand side: "
            f"||g - P g|| / ||g|| = {np.linalg.norm(g - g_proj) / gnorm:.3e} "
            "(constraint data must integrate to zero over each pressure group)"
        )
    g = g_proj
    fnorm = float(np.linalg.norm(f))
    if fnorm == 0.0 and gnorm == 0.0:
        rep = SaddleReport(0, 0.0, True, tol, method=method)
        return np.zeros(nu), np.zeros(npr), rep

    f_scale = fnorm if fnorm > 0 else gnorm
    g_scale = gnorm if gnorm > 0 else fnorm

    def residuals(x, p):
        r1 = f - vns.project(A @ x - Bm.T @ p)
        r2 = g - pns.project(Bm @ x + (Cm @ p if Cm is not None else 0.0))
        return r1, r2

    if method == "uzawa":
        if Cm is not None:
            raise ValueError("uzawa driver does not support a pressure block")
        x, p, iters, restarts = _uzawa(A, Bm, f, g, tol, vns, pns, max_iter)
    elif method == "minres":
        x, p, iters, restarts = _minres_saddle(A, Bm, Cm, f, g, tol, vns, pns,
                                               max_iter, max_restarts, residuals,
                                               f_scale, g_scale, schur_diag)
    else:
        raise ValueError(f"unknown saddle method {method!r}")
    p = pns.project(p)
    r1, r2 = residuals(x, p)
    res1 = float(np.linalg.norm(r1)) / f_scale
    res2 = float(np.linalg.norm(r2)) / g_scale
    _check_finite(x, "saddle velocity")
    _check_finite(p, "saddle pressure")
    ok = res1 <= tol and res2 <= tol
    rep = SaddleReport(iters, max(res1, res2), ok, tol, method=method,
                       primal_residual=res1, constraint_residual=res2, restarts=restarts)
    if not ok:
        log.warning("saddle solve not converged: primal %.3e constraint %.3e (tol %.1e)",
                    res1, res2, tol)
    return x, p, rep


def _minres_saddle(A, Bm, Cm, f, g, tol, vns, pns, max_iter, max_restarts,
                   residuals, f_scale, g_scale, schur_diag):
    nu, npr = A.dim, Bm.shape[0]
    dA = A.diagonal if A.diagonal is not None else np.ones(nu)
    dA = np.where(dA > 0, dA, 1.0)
    if schur_diag is None:
        # B diag(A)^-1 B^T diagonal, plus the C diagonal
        Bsq = Bm.multiply(Bm)
        schur_diag = Bsq @ (1.0 / dA)
        if Cm is not None:
            schur_diag = schur_diag + Cm.diagonal()
    sd = np.asarray(schur_diag, dtype=float)
    sd = np.where(sd > 0, sd, max(float(sd.max()) if sd.size else 1.0, 1e-300))
    # symmetric form [A, -B^T; -B, -C]
    def apply(z):
        x, p = z[:nu], z[nu:]
        top = vns.project(A @ x - Bm.T @ p)
        bot = -pns.project(Bm @ x + (Cm @ p if Cm is not None else 0.0))
        return np.concatenate([top, bot])

    def project(z):
        return np.concatenate([vns.project(z[:nu]), pns.project(z[nu:])])

    def precond(z):
        return np.concatenate([z[:nu] / dA, z[nu:] / sd])

    # rescale blocks so both residual targets are met by one relative criterion
    op = LinearOperator(nu + npr, apply)
    rhs = np.concatenate([f, -g])
    z = np.zeros(nu + npr)
    total = 0
    restarts = 0
    for restarts in range(max_restarts + 1):
        r1, r2 = residuals(z[:nu], z[nu:])
        e1 = np.linalg.norm(r1) / f_scale
        e2 = np.linalg.norm(r2) / g_scale
        if e1 <= tol and e2 <= tol:
            break
        # ask for a relative decrease that reaches the tighter of the two targets
        corr_rhs = np.concatenate([r1, -r2])
        rn = np.linalg.norm(corr_rhs)
        inner_tol = 0.5 * tol * min(f_scale, g_scale) / max(rn, 1e-300)
        inner_tol = min(max(inner_tol, 1e-15), 0.5)
        dz, it = minres(op, corr_rhs, tol=inner_tol, max_iter=max_iter - total,
                        precond=precond, project=project)
        z = z + dz
        total += it
        if total >= max_iter:
            break
    return z[:nu], z[nu:], total, restarts


def _uzawa(A, Bm, f, g, tol, vns, pns, max_iter):
    """CG on S p = B A^-1 f - g with S = B A^-1 B^T, inner CG for A^-1."""
    inner_tol = tol * 1e-2
    # absolute floor: right-hand sides f + B^T p may nearly cancel (blocked flow)
    inner_atol = inner_tol * max(float(np.linalg.norm(f)), 1e-300)
    total = [0]

    def solve_A(rhs, x0=None):
        x, rep = cg(A, rhs, tol=inner_tol, max_iter=max_iter, nullspace=vns, x0=x0,
                    atol=inner_atol)
        total[0] += rep.iterations
        if not rep.converged:
            raise SolverError("uzawa inner cg did not converge")
        return x

    x0 = solve_A(f)
    rhs = pns.project(Bm @ x0 - g)
    npr = Bm.shape[0]
    S = LinearOperator(npr, lambda q: pns.project(Bm @ solve_A(Bm.T @ q)), spd=True)
    # outer: S p = -(B A^-1 f - g)  since x = A^-1 (f + B^T p)
    p, rep = cg(S, -rhs, tol=tol * 0.5, max_iter=max_iter, nullspace=pns,
                precondition=False)
    x = solve_A(f + Bm.T @ p, x0=x0)
    return x, p, total[0] + rep.iterations, 0
