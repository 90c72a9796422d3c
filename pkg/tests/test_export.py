import csv

import numpy as np
import pytest

from poroscale import tensor as tn
from poroscale.export import export_fields, write_csv, write_vtk
from poroscale.macrosolve import (TIME_SERIES_COLUMNS, MacroConfig, MacroMesh, MacroState,
                                  rotational_force, run_case2)
from poroscale.upscale import coefficients_from_tensors


def zero_state(mesh, t=0.0):
    return MacroState(t, np.zeros(mesh.free.size), np.zeros(mesh.n_elements),
                      np.zeros((mesh.n_elements, 3)))


def test_zero_state_vtk_header_and_values(tmp_path):
    mesh = MacroMesh(4)
    files = export_fields([zero_state(mesh)], mesh, tmp_path, prefix="z")
    assert sorted(p.name for p in files) == ["z_q_00000.vtk", "z_u_00000.vtk", "z_v_c_00000.vtk"]
    lines = (tmp_path / "z_q_00000.vtk").read_text().splitlines()
    assert lines[:10] == [
        "# vtk DataFile Version 3.0",
        "q t=0.0",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS 5 5 5",
        "ORIGIN 0.0 0.0 0.0",
        "SPACING 0.25 0.25 0.25",
        "CELL_DATA 64",
        "SCALARS q double 1",
        "LOOKUP_TABLE default",
    ]
    assert lines[10:] == ["0.0"] * 64
    u = (tmp_path / "z_u_00000.vtk").read_text().splitlines()
    assert u[7] == "POINT_DATA 125" and u[8] == "VECTORS u double"
    assert u[9:] == ["0.0 0.0 0.0"] * 125
    # byte-stable: a second export is identical
    first = (tmp_path / "z_u_00000.vtk").read_bytes()
    export_fields([zero_state(mesh)], mesh, tmp_path, prefix="z")
    assert (tmp_path / "z_u_00000.vtk").read_bytes() == first


def test_three_states_three_dumps(tmp_path):
    mesh = MacroMesh(4)
    states = [zero_state(mesh, t) for t in (0.0, 0.1, 0.2)]
    files = export_fields(states, mesh, tmp_path, stride=1)
    q_files = sorted(p.name for p in files if "_q_" in p.name)
    assert q_files == ["macro_q_00000.vtk", "macro_q_00001.vtk", "macro_q_00002.vtk"]
    strided = export_fields(states, mesh, tmp_path / "s", stride=2)
    assert sorted(p.name for p in strided if "_q_" in p.name) == \
        ["macro_q_00000.vtk", "macro_q_00002.vtk"]


def test_vtk_ordering_x_fastest(tmp_path):
    vals = np.zeros((4, 4, 4))
    vals[1, 0, 0] = 1.0
    vals[0, 0, 1] = 2.0
    lines = write_vtk(tmp_path / "f.vtk", "f", vals, 0.25).read_text().splitlines()[10:]
    assert float(lines[1]) == 1.0 and float(lines[16]) == 2.0


def test_nodal_u_layout_matches_mesh(tmp_path):
    coeffs = coefficients_from_tensors(tn.sym_identity4(), B_c=0.01 * np.eye(3))
    series = run_case2(MacroConfig(coeffs, N=4, dt=0.5, T=1.0, force=rotational_force(),
                                   tol=1e-10))
    mesh = series.mesh
    export_fields(series.states[-1:], mesh, tmp_path, prefix="r")
    lines = (tmp_path / "r_u_00000.vtk").read_text().splitlines()[9:]
    nodal = series.states[-1].nodal_u(mesh)
    # point i + 5 (j + 5 k) in VTK order is mesh node id with the same formula
    for node in (0, 6, 31, 62, 124):
        assert [float(v) for v in lines[node].split()] == list(nodal[node])


def test_csv_columns_exact(tmp_path):
    rows = [{c: float(i) for c in TIME_SERIES_COLUMNS} for i in range(3)]
    rows[0]["extra"] = "ignored"
    files = export_fields([], None, tmp_path, prefix="ts", fmt="csv", rows=rows,
                          columns=TIME_SERIES_COLUMNS)
    with open(files[0]) as fh:
        data = list(csv.reader(fh))
    assert data[0] == list(TIME_SERIES_COLUMNS)
    assert data[0] == ["t", "u_norm", "grad_u_norm", "q_norm", "vc_norm", "continuity_residual"]
    assert data[2] == ["1.0"] * 6 and len(data) == 4


def test_errors(tmp_path):
    with pytest.raises(ValueError, match="format"):
        export_fields([], MacroMesh(4), tmp_path, fmt="hdf5")
    with pytest.raises(ValueError):
        write_vtk(tmp_path / "bad.vtk", "f", np.zeros((4, 4, 5)), 0.25)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        write_csv(blocker / "sub.csv", [], ["t"])
