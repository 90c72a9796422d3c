import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from poroscale import tensor as tn
from poroscale.cellgeom import PORE, UnitCell, build_cell
from poroscale.elasticell import SolidMesh, solve_pore_dilatation
from poroscale.linsolve import LinearOperator, Nullspace, SolverError, cg, minres, saddle_solve
from poroscale.stokescell import assemble_mac


def spd(n, seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    return M @ M.T + n * np.eye(n), rng


def test_cg_identity_one_iteration():
    b = np.arange(1.0, 8.0)
    x, rep = cg(np.eye(7), b, tol=1e-14)
    assert np.allclose(x, b) and rep.iterations == 1 and rep.converged


def test_cg_diagonal():
    x, rep = cg(np.diag([1.0, 2.0, 4.0]), np.array([1.0, 2.0, 4.0]), tol=1e-14)
    assert np.allclose(x, 1.0, atol=1e-14) and rep.converged


def test_cg_dense_oracle():
    A, rng = spd(20, 1)
    b = rng.standard_normal(20)
    x, rep = cg(A, b, tol=1e-13)
    assert rep.converged and rep.residual <= 1e-13
    assert np.abs(x - np.linalg.solve(A, b)).max() <= 1e-10


def test_cg_energy_norm_error_nonincreasing():
    A, rng = spd(30, 2)
    b = rng.standard_normal(30)
    xs = np.linalg.solve(A, b)
    errs = []
    for k in range(1, 25):
        x, _ = cg(A, b, tol=1e-300, max_iter=k, precondition=False)
        e = x - xs
        errs.append(float(e @ A @ e))
    assert all(b2 <= b1 * (1 + 1e-12) for b1, b2 in zip(errs, errs[1:]))
    # the stored history of the full run starts at 1 and ends below tolerance
    _, rep = cg(A, b, tol=1e-12)
    assert rep.history[0] == pytest.approx(1.0) and rep.history[-1] <= 1e-12


def test_cg_nullspace_projection():
    n = 12
    L = 2 * np.eye(n) - np.roll(np.eye(n), 1, 0) - np.roll(np.eye(n), -1, 0)
    rng = np.random.default_rng(3)
    b = rng.standard_normal(n)
    ns = Nullspace(np.zeros(n, dtype=np.int64))
    x, rep = cg(L, b, tol=1e-12, nullspace=ns)
    bp = b - b.mean()
    assert rep.converged and abs(x.mean()) < 1e-14
    assert np.linalg.norm(L @ x - bp) <= 1e-11 * np.linalg.norm(bp)


def test_cg_rejects_nonfinite():
    with pytest.raises(SolverError):
        cg(np.eye(3), np.array([1.0, np.nan, 0.0]))


def test_cg_rejects_indefinite():
    with pytest.raises(SolverError, match="positive definite"):
        cg(np.diag([1.0, -1.0]), np.array([1.0, 1.0]), precondition=False)


def test_cg_reports_nonconvergence():
    A, rng = spd(40, 4)
    _, rep = cg(A, rng.standard_normal(40), tol=1e-14, max_iter=2)
    assert not rep.converged and rep.residual > 1e-14


def test_minres_indefinite_dense_oracle():
    rng = np.random.default_rng(5)
    M = rng.standard_normal((15, 15))
    A = M + M.T
    b = rng.standard_normal(15)
    x, iters = minres(A, b, tol=1e-13)
    assert 0 < iters <= 200
    assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)
    assert np.abs(x - np.linalg.solve(A, b)).max() <= 1e-8 * np.abs(np.linalg.solve(A, b)).max()


def test_saddle_zero_data():
    A, _ = spd(6, 6)
    B = np.ones((1, 6))
    x, p, rep = saddle_solve(A, B, np.zeros(6), np.zeros(1))
    assert not x.any() and not p.any() and rep.converged


def tiny_mac_cell():
    """n = 2 cell with a periodic fluid channel of two voxels along x."""
    lab = np.zeros((2, 2, 2), dtype=np.uint8)
    lab[:, 0, 0] = 1
    return UnitCell(lab)


@pytest.mark.parametrize("cell_fn", [
    tiny_mac_cell,
    lambda: build_cell({"shape": "tube", "axis": "xy", "radius": 0.3}, 4),
])
@pytest.mark.parametrize("method", ["minres", "uzawa"])
def test_saddle_stokes_dense_oracle(cell_fn, method):
    sysm = assemble_mac(cell_fn())
    A = sysm.laplacian.toarray()
    B = sysm.divergence.toarray()
    f = sysm.forcing(0)
    nu, npr = B.shape[1], B.shape[0]
    # dense KKT with the pressure-mean constraint appended as a Lagrange row
    K = np.zeros((nu + npr + 1, nu + npr + 1))
    K[:nu, :nu] = A
    K[:nu, nu:nu + npr] = -B.T
    K[nu:nu + npr, :nu] = -B
    K[nu:nu + npr, -1] = K[-1, nu:nu + npr] = 1.0
    rhs = np.concatenate([f, np.zeros(npr + 1)])
    sol = np.linalg.solve(K, rhs)
    x_ref, p_ref = sol[:nu], sol[nu:nu + npr]
    x, p, rep = saddle_solve(sysm.laplacian, sysm.divergence, f, np.zeros(npr), tol=1e-12,
                             pressure_nullspace=Nullspace(sysm.pressure_groups), method=method)
    assert rep.converged
    assert np.abs(x - x_ref).max() <= 1e-9 * np.abs(x_ref).max()
    assert np.abs(p - p_ref).max() <= 1e-9 * max(np.abs(p_ref).max(), np.abs(x_ref).max())


def test_tiny_channel_hand_assembled():
    # two x-faces in a channel walled in y and z. Each wall sits half a cell
    # away (ghost value -v), giving 4/h^2 per walled direction; the periodic
    # x-neighbour of either face is the other face, reached on both sides.
    h = 0.5
    hand = np.array([[10.0, -2.0], [-2.0, 10.0]]) / h**2
    sysm = assemble_mac(tiny_mac_cell())
    idx = sysm.face_index[0][:, 0, 0]
    assert np.array_equal(sysm.laplacian.toarray()[np.ix_(idx, idx)], hand)
    assert sysm.n_faces == 2
    x, p, rep = saddle_solve(sysm.laplacian, sysm.divergence, sysm.forcing(0),
                             np.zeros(sysm.divergence.shape[0]), tol=1e-13,
                             pressure_nullspace=Nullspace(sysm.pressure_groups))
    assert rep.converged
    assert sysm.to_fields(x)[0][:, 0, 0] == pytest.approx([h * h / 8] * 2, rel=1e-12)
    assert np.abs(p).max() <= 1e-12


def test_prescribed_divergence_on_tiny_patch():
    lab = np.zeros((4, 4, 4), dtype=np.uint8)
    lab[1:3, 1:3, 1:3] = 1
    cell = UnitCell(lab, PORE)
    mesh = SolidMesh(cell)
    u0, p0, rep = solve_pore_dilatation(cell, tol=1e-12, mesh=mesh)
    assert rep.converged
    g = -np.full(mesh.n_elements, mesh.h**3)
    assert np.abs(mesh.divergence @ u0 - g).max() <= 1e-10 * np.abs(g).max()


def test_saddle_incompatible_constraint():
    A, _ = spd(4, 7)
    B = np.array([[1.0, -1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0]])
    ns = Nullspace(np.array([0, 0]))
    with pytest.raises(SolverError, match="constraint"):
        saddle_solve(A, B, np.zeros(4), np.array([1.0, 1.0]), pressure_nullspace=ns)


def test_saddle_unknown_method():
    A, _ = spd(4, 8)
    with pytest.raises(ValueError):
        saddle_solve(A, np.ones((1, 4)), np.ones(4), np.zeros(1), method="gmres")


def test_saddle_with_pressure_block_dense_oracle():
    rng = np.random.default_rng(9)
    A, _ = spd(10, 10)
    B = rng.standard_normal((4, 10))
    C = np.diag(rng.uniform(0.1, 1.0, 4))
    f, g = rng.standard_normal(10), rng.standard_normal(4)
    K = np.block([[A, -B.T], [-B, -C]])
    ref = np.linalg.solve(K, np.concatenate([f, -g]))
    x, p, rep = saddle_solve(sp.csr_matrix(A), B, f, g, tol=1e-12, C=C)
    assert rep.converged
    assert np.abs(np.concatenate([x, p]) - ref).max() <= 1e-9 * np.abs(ref).max()


def test_saddle_deterministic():
    sysm = assemble_mac(build_cell({"shape": "tube", "axis": "xyz", "radius": 0.25}, 6))
    args = (sysm.laplacian, sysm.divergence, sysm.forcing(1), np.zeros(sysm.divergence.shape[0]))
    kw = dict(tol=1e-10, pressure_nullspace=Nullspace(sysm.pressure_groups))
    x1, p1, _ = saddle_solve(*args, **kw)
    x2, p2, _ = saddle_solve(*args, **kw)
    assert x1.tobytes() == x2.tobytes() and p1.tobytes() == p2.tobytes()


@given(st.integers(0, 10**6), st.floats(-5, 5), st.floats(-5, 5))
def test_linear_operator_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    mesh = SolidMesh(build_cell({"shape": "sphere", "radius": 0.3}, 4))
    op = LinearOperator.from_matrix(mesh.stiffness(tn.sym_identity4()), spd=True)
    x, y = rng.standard_normal(op.dim), rng.standard_normal(op.dim)
    lhs = op @ (a * x + b * y)
    rhs = a * (op @ x) + b * (op @ y)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * (1 + np.linalg.norm(rhs)) * 10


@given(st.integers(0, 10**6))
def test_cg_linear_in_rhs(seed):
    A, rng = spd(12, seed)
    b1, b2 = rng.standard_normal(12), rng.standard_normal(12)
    x1, _ = cg(A, b1, tol=1e-13)
    x2, _ = cg(A, b2, tol=1e-13)
    x3, _ = cg(A, b1 + 2 * b2, tol=1e-13)
    assert np.allclose(x3, x1 + 2 * x2, atol=1e-10 * (1 + np.abs(x3).max()))


def test_converged_implies_within_tolerance():
    for seed in range(5):
        A, rng = spd(25, seed)
        _, rep = cg(A, rng.standard_normal(25), tol=1e-8)
        assert rep.converged and rep.residual <= 1.01e-8
