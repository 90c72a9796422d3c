import dataclasses

import numpy as np
import pytest

from poroscale import tensor as tn
from poroscale.linsolve import SolverError
from poroscale.macrosolve import (MacroConfig, MacroMesh, constant_force, convergence_orders,
                                  gradient_force, manufactured_case1, rigid_limit_study,
                                  rotational_force, run_case1, run_case2, solve_case1,
                                  solve_rigid_darcy, zero_force)
from poroscale.upscale import CASE_I, coefficients_from_tensors

A_ISO = 2.0 * tn.sym_identity4()
HESS = np.array([[1.0, 0.2, 0.0], [0.2, -0.5, 0.1], [0.0, 0.1, 0.3]])


def aniso_A():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((6, 6))
    return tn.sym_identity4() + 0.1 * (M @ M.T)


def case1_coeffs(A=A_ISO, rho_f=1.3):
    return coefficients_from_tensors(A, m_p=0.3, m_c=0.2, rho_f=rho_f, regime=CASE_I)


def case2_coeffs(B=None, A=A_ISO, rho_f=1.3):
    B = 0.01 * np.eye(3) if B is None else B
    return coefficients_from_tensors(A, B_c=B, m_p=0.3, m_c=0.2, rho_f=rho_f)


def test_case1_zero_force():
    s = solve_case1(MacroConfig(case1_coeffs(), N=6, force=zero_force()), 1.0)
    assert not s.u.any() and not s.q.any()


def test_case2_zero_force():
    series = run_case2(MacroConfig(case2_coeffs(), N=6, dt=0.25, T=1.0, force=zero_force()))
    assert len(series.states) == 5
    for s in series.states:
        assert not s.u.any() and not s.q.any() and not s.v_c.any()
    assert series.energy["work"] == 0.0 and series.energy["balance_defect"] == 0.0


@pytest.mark.parametrize("A", [A_ISO, aniso_A()], ids=["isotropic", "anisotropic"])
def test_manufactured_convergence_8_16(A):
    cfg = MacroConfig(case1_coeffs(A), tol=1e-10)
    res = [manufactured_case1(cfg, N) for N in (8, 16)]
    u_order = convergence_orders([r.u_error for r in res], [8, 16])[0]
    q_order = convergence_orders([r.q_error for r in res], [8, 16])[0]
    assert u_order >= 1.8 and q_order >= 0.9


def test_lambda_doubling_halves_u():
    f = rotational_force()
    cfg = MacroConfig(case1_coeffs(), N=16, force=f, tol=1e-11)
    a = solve_case1(cfg, 1.0)
    b = solve_case1(dataclasses.replace(cfg, lambda0=2 * cfg.lambda0), 1.0)
    mesh = MacroMesh(16)
    assert mesh.l2_norm(b.u) == pytest.approx(0.5 * mesh.l2_norm(a.u), rel=1e-7)
    assert np.abs(b.q - a.q).max() <= 1e-7 * np.abs(a.q).max()


def test_case1_series_velocities():
    cfg = MacroConfig(case1_coeffs(), N=6, dt=0.1, T=0.4, force=constant_force([0, 0, -1], ramp=0.4))
    series = run_case1(cfg)
    assert len(series.states) == 5 and not series.states[0].u.any()
    s1, s2 = series.states[1], series.states[2]
    assert np.allclose(s2.v_s, (s2.u - s1.u) / cfg.dt)
    assert np.isfinite(s2.v_c).all()


def test_state_invariants_case2():
    cfg = MacroConfig(case2_coeffs(), N=8, dt=0.1, T=0.5, force=rotational_force(ramp=0.2),
                      tol=1e-10)
    series = run_case2(cfg)
    mesh = series.mesh
    for s in series.states:
        nodal = s.nodal_u(mesh)
        assert not nodal[mesh.boundary_nodes].any()
        assert abs(s.q.mean()) <= 1e-12 * max(np.abs(s.q).max(), 1e-300)
        assert s.continuity_residual <= 10 * cfg.tol
    e = series.energy
    assert e["balance_defect"] <= 1e-8
    assert e["elastic"] + e["darcy_dissipation"] <= e["work"] * (1 + 1e-8)
    assert e["darcy_dissipation"] > 0
    rows = series.rows()
    assert [r["t"] for r in rows] == pytest.approx([0.1 * k for k in range(6)])


def test_case2_tends_to_case1_as_permeability_vanishes():
    f = rotational_force(ramp=0.2)
    u1 = solve_case1(MacroConfig(case1_coeffs(), N=8, force=f, tol=1e-9, stabilization=0.0), 1.0).u
    diffs = []
    for eps in (1e-3, 1e-4, 1e-5):
        cfg = MacroConfig(case2_coeffs(eps * np.eye(3)), N=8, dt=0.1, T=1.0, force=f, tol=1e-9)
        u2 = run_case2(cfg, keep_states=False).states[-1].u
        diffs.append(np.linalg.norm(u2 - u1) / np.linalg.norm(u1))
    assert diffs[0] > diffs[1] > diffs[2] and diffs[2] <= 0.01


@pytest.mark.parametrize("B", [0.01 * np.eye(3), 0.01 * np.diag([1.0, 2.0, 3.0])],
                         ids=["isotropic", "diagonal"])
def test_conservative_darcy(B):
    c = case2_coeffs(B)
    f = gradient_force([0.3, -1.0, 0.5], HESS)
    d = solve_rigid_darcy(MacroConfig(c, N=8, force=f, tol=1e-12), 1.0)
    mesh = MacroMesh(8)
    err = d.q - c.m * c.rho_f * f.potential(mesh.centers)
    assert np.abs(err - err.mean()).max() <= 1e-6
    assert np.abs(d.v_c).max() <= 1e-6
    assert abs(d.q.mean()) <= 1e-12 * np.abs(d.q).max()


def test_gravity_darcy():
    c = case2_coeffs()
    d = solve_rigid_darcy(MacroConfig(c, N=8, force=constant_force([0, 0, -1]), tol=1e-12), 0.0)
    x3 = MacroMesh(8).centers[:, 2]
    err = d.q + c.m * c.rho_f * x3
    assert np.abs(err - err.mean()).max() <= 1e-6 and np.abs(d.v_c).max() <= 1e-6


def test_rotational_darcy_circulates():
    cfg = MacroConfig(case2_coeffs(), N=8, force=rotational_force(), tol=1e-10)
    d = solve_rigid_darcy(cfg, 1.0)
    assert np.abs(d.v_c).max() > 1e-4
    assert np.abs(d.divergence).max() <= cfg.tol
    # only interior faces carry flux, so the net outflow through the walls is zero
    assert abs(d.divergence.sum()) <= cfg.tol


def test_rigid_darcy_rejects_zero_permeability():
    with pytest.raises(ValueError, match="rigid limit undefined: zero permeability"):
        solve_rigid_darcy(MacroConfig(case2_coeffs(np.zeros((3, 3))), N=6,
                                      force=rotational_force()), 1.0)


def test_rigid_limit_validation():
    cfg = MacroConfig(case2_coeffs(), N=6, force=rotational_force())
    with pytest.raises(ValueError, match="insufficient λ₀ samples"):
        rigid_limit_study(cfg, [1e2])
    with pytest.raises(ValueError, match="ascending"):
        rigid_limit_study(cfg, [1e6, 1e4, 1e2])
    with pytest.raises(ValueError, match="4 decades"):
        rigid_limit_study(cfg, [1.0, 10.0, 100.0])
    with pytest.raises(ValueError, match="CASE_II"):
        rigid_limit_study(MacroConfig(case1_coeffs(), N=6), [1e2, 1e4, 1e6])


def test_rigid_limit_small_grid():
    cfg = MacroConfig(case2_coeffs(), N=6, dt=0.1, T=0.5, force=rotational_force(ramp=1.0),
                      tol=1e-10)
    rows = rigid_limit_study(cfg, [1e2, 1e4, 1e6], threads=3)
    for key in ("grad_u_norm", "q_error", "v_error"):
        vals = [r[key] for r in rows]
        assert vals[0] > vals[1] > vals[2]
    assert rows[-1]["grad_u_norm"] <= 1e-3 * rows[0]["grad_u_norm"]
    assert rows == rigid_limit_study(cfg, [1e2, 1e4, 1e6], threads=1)


def test_config_and_regime_errors():
    with pytest.raises(ValueError, match="CASE_I"):
        solve_case1(MacroConfig(case2_coeffs(), N=6), 0.0)
    with pytest.raises(ValueError, match="CASE_II"):
        run_case2(MacroConfig(case1_coeffs(), N=6))
    with pytest.raises(ValueError, match="finite mu1"):
        run_case2(MacroConfig(case2_coeffs(), N=6, mu1=np.inf))
    with pytest.raises(ValueError, match="dt"):
        run_case2(MacroConfig(case2_coeffs(), N=6, dt=0.0))
    with pytest.raises(ValueError, match="N >= 4"):
        MacroMesh(3)
    bad = A_ISO.copy()
    bad[0, 0] = -1.0
    with pytest.raises(ValueError, match="positive definite"):
        solve_case1(MacroConfig(case1_coeffs(bad), N=6, force=rotational_force()), 1.0)


def test_nonconvergence_is_solver_error():
    cfg = MacroConfig(case1_coeffs(), N=6, force=rotational_force(), tol=1e-300)
    with pytest.raises(SolverError, match="t=1"):
        solve_case1(cfg, 1.0)
