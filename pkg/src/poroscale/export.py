"""Legacy-VTK and CSV writers."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

FORMATS = ("vtk-legacy", "csv")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_vtk(path, name: str, values: np.ndarray, spacing: float,
              location: str = "cell", title: str = "poroscale field") -> Path:
    """Write one scalar or vector field as ASCII STRUCTURED_POINTS.

    ``values`` has shape (n, n, n) or (n, n, n, 3), indexed [ix, iy, iz].
    Cell data sits on an (n+1)^3 point lattice; point data on an n^3 lattice.
    """
    path = Path(path)
    values = np.asarray(values, dtype=float)
    vector = values.ndim == 4
    n = values.shape[0]
    if values.shape[:3] != (n, n, n) or (vector and values.shape[3] != 3):
        raise ValueError(f"field {name!r} must be (n, n, n) or (n, n, n, 3), got {values.shape}")
    if location not in ("cell", "point"):
        raise ValueError(f"location must be 'cell' or 'point', got {location!r}")
    dims = n + 1 if location == "cell" else n
    origin = 0.0
    # VTK wants x fastest
    flat = values.transpose(2, 1, 0, 3).reshape(-1, 3) if vector else values.transpose(2, 1, 0).ravel()
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {dims} {dims} {dims}",
        f"ORIGIN {origin!r} {origin!r} {origin!r}",
        f"SPACING {spacing!r} {spacing!r} {spacing!r}",
        f"{'CELL' if location == 'cell' else 'POINT'}_DATA {n**3}",
    ]
    if vector:
        lines.append(f"VECTORS {name} double")
        lines += [" ".join(_fmt(c) for c in row) for row in flat]
    else:
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [_fmt(v) for v in flat]
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write VTK file {path}: {exc}") from exc
    return path


def write_csv(path, rows, columns) -> Path:
    """Rows (dicts) to CSV with exactly ``columns`` in order; floats in repr form."""
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([_fmt(r[c]) if isinstance(r[c], (float, np.floating)) else r[c]
                            for c in columns])
    except OSError as exc:
        raise OSError(f"cannot write CSV file {path}: {exc}") from exc
    return path


def macro_state_fields(state, mesh) -> dict:
    """Named arrays of a macro state: nodal u, cell q, and cell v_c when present."""
    N = mesh.N
    u = mesh.expand(state.u).reshape(N + 1, N + 1, N + 1, 3, order="F")
    # node id = i + (N+1)(j + (N+1)k) -> [i, j, k] via Fortran reshape of the id axis
    out = {"u": ("point", u), "q": ("cell", np.asarray(state.q).reshape(N, N, N))}
    if state.v_c is not None:
        out["v_c"] = ("cell", np.asarray(state.v_c).reshape(N, N, N, 3))
    return out


def export_fields(states, mesh, outdir, prefix: str = "macro", fmt: str = "vtk-legacy",
                  stride: int = 1, columns=None, rows=None) -> list:
    """Dump states: one VTK file per field per dump with an ``_{index:05d}`` suffix,
    or a single CSV time series (``rows``/``columns`` per the macro schema)."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown export format {fmt!r}; expected one of {FORMATS}")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        return [write_csv(outdir / f"{prefix}.csv", rows, columns)]
    if stride < 1:
        raise ValueError(f"dump stride must be >= 1, got {stride}")
    written = []
    for idx, state in enumerate(states):
        if idx % stride:
            continue
        for name, (loc, arr) in macro_state_fields(state, mesh).items():
            written.append(write_vtk(outdir / f"{prefix}_{name}_{idx:05d}.vtk", name, arr,
                                     mesh.h, loc, f"{name} t={state.t!r}"))
    return written


def stokes_fields(axis_solution, system) -> dict:
    """|V| averaged to voxel centers and the pressure, for one Stokes axis solution."""
    vel = axis_solution.velocity
    centers = np.stack([0.5 * (vel[d] + np.roll(vel[d], 1, axis=d)) for d in range(3)], axis=-1)
    return {"speed": np.linalg.norm(centers, axis=-1), "pressure": axis_solution.pressure}
