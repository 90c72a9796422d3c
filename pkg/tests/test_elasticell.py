import numpy as np
import pytest

from poroscale import tensor as tn
from poroscale.cellgeom import CRACK, PORE, GeometryError, UnitCell, build_cell
from poroscale.elasticell import (PAIRS, SolidMesh, assemble_Ac, assemble_As, assemble_bundle,
                                  energy_form_Ac, energy_form_As, identity_suite,
                                  solve_crack_cell, solve_crack_corrector, solve_pore_cell,
                                  solve_pore_corrector, solve_pore_dilatation)

from .conftest import random_sym

# y <-> z relabelling of Voigt slots (11, 22, 33, 23, 13, 12)
SWAP_YZ = [0, 2, 1, 3, 5, 4]


def rel_sym_defect(T, rng, pairs=50):
    worst = 0.0
    norm = np.abs(T).max()
    for _ in range(pairs):
        z, e = random_sym(rng), random_sym(rng)
        d = abs(tn.quadratic_form(T, z, e) - tn.quadratic_form(T, e, z))
        worst = max(worst, d / (norm * np.linalg.norm(z) * np.linalg.norm(e)))
    return worst


def test_all_solid_pore_cell():
    pore = solve_pore_cell(build_cell({"shape": "solid"}, 4))
    for key in PAIRS:
        assert not pore.U[key].any() and not pore.Q[key].any()
    assert pore.U0 is None and pore.m_p == 0.0
    assert np.array_equal(assemble_Ac(pore)[2], tn.sym_identity4())
    ids = identity_suite(pore)
    assert ids["pore_energy"] == 0.0 and ids["max"] == 0.0


def test_dilatation_rejected_on_all_solid():
    with pytest.raises(GeometryError, match="dilatation problem infeasible on all-solid cell"):
        solve_pore_dilatation(build_cell({"shape": "solid"}, 4))


def test_pore_requires_percolating_solid():
    slab = build_cell({"shape": "slab", "axis": "z", "fraction": 0.5}, 8)
    with pytest.raises(GeometryError):
        solve_pore_corrector(slab, (1, 1))


def test_pore_corrector_energy_identity(sphere_pore):
    K = sphere_pore.K
    for key in PAIRS:
        u = sphere_pore.U[key]
        J = tn.jij_basis(*key)
        energy = float(u @ (K @ u))
        lhs = energy + tn.ddot(J, sphere_pore.strain_avg[key])
        assert abs(lhs) <= 1e-9 * max(energy, sphere_pore.mesh.volume * tn.ddot(J, J))


def test_pore_normalization_and_constraints(sphere_pore):
    mesh = sphere_pore.mesh
    g = -np.full(mesh.n_elements, mesh.h**3)
    for key in PAIRS:
        u = sphere_pore.U[key]
        assert np.abs(mesh.mean(u)).max() <= 1e-12 * (1 + np.abs(u).max())
        assert np.abs(mesh.divergence @ u).max() <= 1e-9 * mesh.h**3
    u0 = sphere_pore.U0
    assert np.abs(mesh.mean(u0)).max() <= 1e-12 * (1 + np.abs(u0).max())
    assert np.abs(mesh.divergence @ u0 - g).max() <= 1e-9 * mesh.h**3


def test_dilatation_identities(sphere_pore):
    ids = identity_suite(sphere_pore)
    assert ids["dilatation_energy"] <= 1e-9
    assert ids["dilatation_orthogonality"] <= 1e-9
    assert ids["pressure_consistency"] <= 1e-9
    u0 = sphere_pore.U0
    e00 = float(u0 @ (sphere_pore.K @ u0))
    assert sphere_pore.pressure_avg0 == pytest.approx(-e00, rel=1e-9)


def test_pressure_consistency_of_C3(sphere_pore):
    for key in PAIRS:
        J = tn.jij_basis(*key)
        assert sphere_pore.pressure_avg[key] == pytest.approx(
            -tn.ddot(sphere_pore.strain_avg0, J), abs=1e-9 * abs(sphere_pore.pressure_avg0))


def test_Ac_spd_and_symmetric(sphere_pore, sphere_Ac):
    rep = tn.spd_report(sphere_Ac)
    assert rep.spd and rep.symmetry_defect <= 1e-7
    rng = np.random.default_rng(10)
    assert rel_sym_defect(sphere_Ac, rng) <= 1e-7
    C_p = assemble_Ac(sphere_pore)[1]
    assert rel_sym_defect(C_p, rng, 10) <= 1e-7


def test_energy_form_Ac_oracle(sphere_pore, sphere_Ac):
    assert energy_form_Ac(sphere_pore, np.zeros(6)) == 0.0
    beta = tn.spd_report(sphere_Ac).min_eig
    rng = np.random.default_rng(11)
    for _ in range(5):
        z = random_sym(rng)
        oracle = energy_form_Ac(sphere_pore, z)
        assert abs(oracle - tn.quadratic_form(sphere_Ac, z, z)) <= 1e-6 * abs(oracle)
        assert oracle >= beta * tn.ddot(z, z) * (1 - 1e-9)
        e = random_sym(rng)
        assert energy_form_Ac(sphere_pore, z, e) == pytest.approx(
            tn.quadratic_form(sphere_Ac, z, e), rel=1e-6, abs=1e-9 * abs(oracle))


def test_near_solid_pore():
    # a 2x2x2 pore is balanced against every alternating Q1-P0 pressure mode
    lab = np.zeros((8, 8, 8), dtype=np.uint8)
    lab[3:5, 3:5, 3:5] = 1
    pore = solve_pore_cell(UnitCell(lab, PORE), tol=1e-10)
    parts, C_p, A_c = assemble_Ac(pore)
    assert tn.spd_report(A_c).min_eig > 0
    # the dilatation pressure of a tiny pore is large, so C4 dominates A_c
    base = (1 - pore.m_p) * tn.sym_identity4() + parts[3]
    assert parts[3][0, 0] > 10 * (1 - pore.m_p)
    assert np.abs(A_c - base).max() <= 0.05 * np.abs(base).max()
    rng = np.random.default_rng(12)
    for _ in range(5):
        z = random_sym(rng)
        oracle = energy_form_Ac(pore, z)
        assert abs(oracle - tn.quadratic_form(A_c, z, z)) <= 1e-6 * oracle


def test_voxel_symmetry_slab_pores():
    spec = {"shape": "slab", "fraction": 0.25}
    cy = build_cell({**spec, "axis": "y"}, 8)
    cz = build_cell({**spec, "axis": "z"}, 8)
    assert np.array_equal(cz.labels, cy.labels.transpose(0, 2, 1))
    py = solve_pore_cell(cy, tol=1e-12, validate=False)
    pz = solve_pore_cell(cz, tol=1e-12, validate=False)
    swap = {(1, 1): (1, 1), (2, 2): (3, 3), (3, 3): (2, 2),
            (2, 3): (2, 3), (1, 3): (1, 2), (1, 2): (1, 3)}
    scale = max(np.abs(v).max() for v in py.strain_avg.values())
    for key, other in swap.items():
        assert np.abs(pz.strain_avg[key] - py.strain_avg[other][SWAP_YZ]).max() <= 1e-10 * scale
    assert np.abs(pz.strain_avg0 - py.strain_avg0[SWAP_YZ]).max() <= 1e-10 * scale


def test_crack_all_solid_gives_As_equal_Ac(sphere_Ac):
    crack = solve_crack_cell(build_cell({"shape": "solid"}, 4, CRACK), sphere_Ac)
    for key in PAIRS:
        assert not crack.U[key].any()
    C_c, A_s = assemble_As(crack, sphere_Ac, 0.0)
    assert not C_c.any()
    assert np.array_equal(A_s, sphere_Ac)


def test_crack_corrector_dense_oracle():
    cell = build_cell({"shape": "tube", "axis": "x", "radius": 0.3}, 4, CRACK)
    J4 = tn.sym_identity4()
    mesh = SolidMesh(cell)
    K = mesh.stiffness(J4).toarray()
    nd = mesh.ndof
    # translations constrained through the solid-mean rows (one component)
    Tm = np.zeros((3, nd))
    for c in range(3):
        Tm[c, c::3] = mesh.node_weight
    big = np.block([[K, Tm.T], [Tm, np.zeros((3, 3))]])
    for key in PAIRS:
        b = -mesh.stress_load(tn.contract(J4, tn.jij_basis(*key)))
        ref = np.linalg.solve(big, np.concatenate([b, np.zeros(3)]))[:nd]
        u, rep = solve_crack_corrector(cell, J4, key, tol=1e-12, mesh=mesh)
        scale = max(np.abs(ref).max(), 1e-300)
        assert np.abs(u - ref).max() <= 1e-9 * scale or (scale < 1e-12 and not u.any())


def test_crack_energy_identity_and_oracle(sphere_pore, tube_crack, sphere_Ac):
    ids = identity_suite(sphere_pore, tube_crack, sphere_Ac)
    assert ids["crack_energy"] <= 1e-9
    C_c, A_s = assemble_As(tube_crack)
    rep = tn.spd_report(A_s)
    assert rep.spd and rep.symmetry_defect <= 1e-7
    rng = np.random.default_rng(13)
    assert rel_sym_defect(A_s, rng) <= 1e-7
    for _ in range(5):
        e = random_sym(rng)
        oracle = energy_form_As(tube_crack, e)
        assert abs(oracle - tn.quadratic_form(A_s, e, e)) <= 1e-6 * abs(oracle)
    for key in PAIRS:
        mesh = tube_crack.mesh
        u = tube_crack.U[key]
        assert np.abs(mesh.mean(u)).max() <= 1e-12 * (1 + np.abs(u).max())


def test_crack_rejects_non_spd():
    cell = build_cell({"shape": "tube", "axis": "x", "radius": 0.3}, 8, CRACK)
    bad = tn.sym_identity4().copy()
    bad[0, 0] = -1.0
    with pytest.raises(ValueError, match="positive definite"):
        solve_crack_corrector(cell, bad, (1, 1))
    with pytest.raises(ValueError, match="positive definite"):
        solve_crack_cell(cell, bad)


def test_bundle(sphere_pore, tube_crack):
    b = assemble_bundle(sphere_pore, tube_crack)
    d = b.as_dict()
    assert b.A_c_report.spd and b.A_s_report.spd
    assert len(d["A_s"]) == 36 and len(d["C_p_parts"]) == 4


def test_identity_residuals_shrink_with_tolerance():
    pc = build_cell({"shape": "sphere", "radius": 0.3}, 8)
    cc = build_cell({"shape": "tube", "axis": "xyz", "radius": 0.2}, 8, CRACK)
    out = {}
    for tol in (1e-7, 1e-10):
        pore = solve_pore_cell(pc, tol=tol)
        A_c = assemble_Ac(pore)[2]
        out[tol] = identity_suite(pore, solve_crack_cell(cc, A_c, tol=tol), A_c)
        assert out[tol]["max"] <= 10 * tol
    assert out[1e-10]["max"] < out[1e-7]["max"]


def test_threads_reproducible():
    pc = build_cell({"shape": "sphere", "radius": 0.3}, 6)
    a = assemble_Ac(solve_pore_cell(pc, threads=1))[2]
    b = assemble_Ac(solve_pore_cell(pc, threads=4))[2]
    assert a.tobytes() == b.tobytes()


def test_stabilized_pore_solve_remains_consistent():
    pc = build_cell({"shape": "sphere", "radius": 0.3}, 6)
    plain = assemble_Ac(solve_pore_cell(pc, tol=1e-10))[2]
    stab = assemble_Ac(solve_pore_cell(pc, tol=1e-10, stabilization=0.1))[2]
    assert tn.spd_report(stab).spd
    assert np.abs(stab - plain).max() <= 0.2 * np.abs(plain).max()
