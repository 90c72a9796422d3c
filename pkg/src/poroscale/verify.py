"""Fast invariant battery behind ``poroscale verify``."""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import tensor as tn
from .cellgeom import CRACK, build_cell, connectivity, porosity
from .linsolve import cg

TOL = 1e-9


def _tensor_checks() -> dict:
    rng = np.random.default_rng(0)
    J = tn.sym_identity4()
    worst = 0.0
    for _ in range(20):
        z = tn.pack(_sym(rng))
        A = rng.standard_normal((6, 6))
        B, C = tn.pack(_sym(rng)), tn.pack(_sym(rng))
        worst = max(worst, np.abs(tn.contract(J, z) - z).max())
        Z = tn.pack(_sym(rng))
        worst = max(worst, np.abs(tn.contract(tn.outer(B, C), Z) - B * tn.ddot(C, Z)).max())
        worst = max(worst, np.abs(tn.compose(J, A) - A).max(), np.abs(tn.compose(A, J) - A).max())
    rep = tn.spd_report(J)
    ok = worst < 1e-12 and rep.symmetric and abs(rep.min_eig - 0.5) < 1e-14
    return {"max_defect": float(worst), "J_min_eig": rep.min_eig, "passed": bool(ok)}


def _sym(rng) -> np.ndarray:
    M = rng.standard_normal((3, 3))
    return 0.5 * (M + M.T)


def _geometry_checks() -> dict:
    slab = build_cell({"shape": "slab", "axis": "z", "fraction": 0.5}, 8)
    sphere = build_cell({"shape": "sphere", "radius": 0.25}, 16)
    tube = build_cell({"shape": "tube", "axis": "x", "radius": 0.3}, 16)
    ok = (int(slab.labels.sum()) == 256
          and connectivity(slab).percolates == (True, True, False)
          and not connectivity(sphere).connected
          and connectivity(tube).percolates == (True, False, False)
          and porosity(slab) + porosity(slab.complement()) == 1.0)
    return {"passed": bool(ok)}


def _cg_check() -> dict:
    rng = np.random.default_rng(1)
    M = rng.standard_normal((20, 20))
    A = M @ M.T + 20 * np.eye(20)
    b = rng.standard_normal(20)
    x, rep = cg(A, b, tol=1e-13)
    err = float(np.abs(x - np.linalg.solve(A, b)).max())
    return {"error": err, "passed": bool(err < 1e-10 and rep.converged)}


def _poiseuille_check(threads: int) -> dict:
    from .stokescell import compute_Bc, poiseuille_slab
    cell = build_cell({"shape": "slab", "axis": "z", "fraction": 0.5}, 16, CRACK)
    res = compute_Bc(cell, TOL, threads)
    exact = poiseuille_slab(0.5)
    rel = abs(res.B[0, 0] - exact) / exact
    ok = rel < 0.05 and abs(res.B[2, 2]) <= 1e-8 and res.symmetry_defect <= 1e-7 \
        and res.gram_defect <= 1e-6
    return {"B11": float(res.B[0, 0]), "relative_error": float(rel), "passed": bool(ok)}


def _pipeline_check(threads: int) -> dict:
    from .upscale import CASE_I, CASE_II, UpscaleConfig, combined_porosity, mixture_density, \
        run_pipeline
    cfg = UpscaleConfig(pore={"shape": "sphere", "radius": 0.3}, n_pore=8,
                        crack={"shape": "tube", "axis": "x", "radius": 0.3}, n_crack=8,
                        tol=TOL, threads=threads)
    c = run_pipeline(cfg)
    ident = c.diagnostics["identities"]["max"]
    spd = tn.spd_report(c.A_c).spd and tn.spd_report(c.A_s).spd
    alg = abs(c.m - combined_porosity(c.m_p, c.m_c)) <= 1e-14 and \
        abs(c.rho_hat - mixture_density(c.m, c.rho_f, c.rho_s)) <= 1e-14
    inf_regime = run_pipeline(dataclasses.replace(cfg, mu1=float("inf"), identities=False)).regime
    ok = ident <= 10 * TOL and spd and alg and c.regime == CASE_II and inf_regime == CASE_I
    return {"identities_max": ident, "regime": c.regime, "passed": bool(ok)}


def _darcy_check() -> dict:
    from .macrosolve import MacroConfig, MacroMesh, gradient_force, solve_rigid_darcy
    from .upscale import coefficients_from_tensors
    c = coefficients_from_tensors(tn.sym_identity4(), np.diag([0.01, 0.02, 0.015]))
    H = np.array([[1.0, 0.2, 0.0], [0.2, -0.5, 0.1], [0.0, 0.1, 0.3]])
    F = gradient_force([0.3, -1.0, 0.5], H)
    cfg = MacroConfig(c, N=8, force=F, tol=1e-12)
    r = solve_rigid_darcy(cfg, 1.0)
    q = c.m * c.rho_f * F.potential(MacroMesh(8).centers)
    q -= q.mean()
    err = float(np.abs(r.q - q).max())
    vmax = float(np.abs(r.v_c).max())
    return {"q_error": err, "v_max": vmax, "passed": bool(err < 1e-6 and vmax < 1e-6)}


def _rigid_limit_check(threads: int) -> dict:
    from .macrosolve import MacroConfig, rigid_limit_study, rotational_force, run_case2
    from .upscale import coefficients_from_tensors
    c = coefficients_from_tensors(tn.sym_identity4(), 0.01 * np.eye(3))
    cfg = MacroConfig(c, N=6, dt=0.25, T=0.5, force=rotational_force(ramp=1.0), tol=1e-10)
    tab = rigid_limit_study(cfg, [1e2, 1e4, 1e6], threads)
    series = run_case2(cfg)
    dec = all(tab[i + 1][k] < tab[i][k] for i in range(2)
              for k in ("grad_u_norm", "q_error", "v_error"))
    cont = max(s.continuity_residual for s in series.states)
    ok = dec and cont <= 10 * cfg.tol and series.energy["balance_defect"] < 1e-6
    return {"table": tab, "continuity_residual": cont,
            "energy_balance_defect": series.energy["balance_defect"], "passed": bool(ok)}


def run_checks(threads: int = 1) -> list:
    """Run every check; a crashing check counts as failed with its message."""
    checks = [
        ("tensor algebra", _tensor_checks),
        ("cell geometry", _geometry_checks),
        ("conjugate gradients", _cg_check),
        ("laminate permeability", lambda: _poiseuille_check(threads)),
        ("two-scale pipeline and identities", lambda: _pipeline_check(threads)),
        ("conservative-force Darcy", _darcy_check),
        ("rigid limit smoke", lambda: _rigid_limit_check(threads)),
    ]
    out = []
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            res = fn()
        except Exception as exc:  # noqa: BLE001 - report, do not crash
            res = {"passed": False, "error": f"{type(exc).__name__}: {exc}"}
        res["name"] = name
        res["seconds"] = round(time.perf_counter() - t0, 3)
        out.append(res)
    return out
