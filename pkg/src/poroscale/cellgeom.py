"""
Periodic voxel unit cells for the pore scale (Y) and the crack scale (Z).

Labels are stored in an ``(n, n, n)`` uint8 array indexed ``[ix, iy, iz]``;
``1`` is FLUID and ``0`` is SOLID. A voxel is FLUID iff its center lies in the
fluid region of the parametric shape.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

FLUID = 1
SOLID = 0
PORE = "PORE"
CRACK = "CRACK"
SHAPES = ("slab", "tube", "sphere", "plates", "solid", "fluid", "voxel-file")
_AXES = {"x": 0, "y": 1, "z": 2, 0: 0, 1: 1, 2: 2}


class GeometryError(ValueError):
    """Invalid or inadmissible unit-cell geometry."""


@dataclass(frozen=True)
class UnitCell:
    labels: np.ndarray
    scale: str = PORE
    description: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or len(set(labels.shape)) != 1:
            raise GeometryError(f"label array must be a cube, got shape {labels.shape}")
        if not np.isin(labels, (SOLID, FLUID)).all():
            raise GeometryError("labels must be 0 (SOLID) or 1 (FLUID)")
        if self.scale not in (PORE, CRACK):
            raise GeometryError(f"unknown scale tag {self.scale!r}")
        labels = labels.astype(np.uint8, copy=True)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def fluid(self) -> np.ndarray:
        return self.labels == FLUID

    @property
    def solid(self) -> np.ndarray:
        return self.labels == SOLID

    def complement(self) -> "UnitCell":
        return UnitCell(1 - self.labels, self.scale, {"shape": "complement"})


def _axis(value) -> int:
    try:
        return _AXES[value]
    except KeyError:
        raise GeometryError(f"unknown axis {value!r}; use x, y or z") from None


def _tube_axes(value) -> list[int]:
    """``"x"`` or a combination such as ``"xyz"`` (union of orthogonal tubes)."""
    if isinstance(value, str) and len(value) > 1:
        axes = sorted({_axis(c) for c in value})
        if len(axes) != len(value):
            raise GeometryError(f"repeated axis in tube axes {value!r}")
        return axes
    return [_axis(value)]


def voxel_centers(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = (np.arange(n) + 0.5) / n
    return np.meshgrid(c, c, c, indexing="ij")


def build_cell(spec: dict, n: int | None = None, scale: str = PORE) -> UnitCell:
    """Voxelize a parametric shape descriptor.

    Supported descriptors (``shape`` key)::

        slab    axis, fraction    fluid layer [0, fraction) along ``axis``
        tube    axis, radius      fluid cylinder about the cell's center line;
                                  axis may combine letters (xyz) for crossing tubes
        sphere  radius            fluid ball at the cell center
        plates  fractions         fluid box [0, f_k) per axis; f_k = 1 spans axis k
        solid / fluid             uniform cells
        voxel-file  path          see :func:`read_voxel_file`
    """
    spec = dict(spec)
    shape = spec.pop("shape", None)
    if shape not in SHAPES:
        raise GeometryError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    if shape == "voxel-file":
        cell = read_voxel_file(spec["path"])
        if n is not None and cell.n != n:
            raise GeometryError(f"voxel file has n={cell.n}, config requests n={n}")
        return cell
    if n is None or n < 4:
        raise GeometryError(f"resolution n must be >= 4, got {n}")
    x = voxel_centers(n)
    if shape == "slab":
        phi = float(spec["fraction"])
        if not 0.0 <= phi <= 1.0:
            raise GeometryError(f"slab fraction must lie in [0, 1], got {phi}")
        fluid = x[_axis(spec.get("axis", "z"))] < phi
    elif shape == "tube":
        r = float(spec["radius"])
        fluid = np.zeros((n, n, n), dtype=bool)
        for k in _tube_axes(spec.get("axis", "x")):
            others = [x[a] - 0.5 for a in range(3) if a != k]
            fluid |= others[0] ** 2 + others[1] ** 2 < r * r
    elif shape == "sphere":
        r = float(spec["radius"])
        fluid = sum((xi - 0.5) ** 2 for xi in x) < r * r
    elif shape == "plates":
        fr = [float(f) for f in spec["fractions"]]
        if len(fr) != 3 or not all(0.0 <= f <= 1.0 for f in fr):
            raise GeometryError(f"plates needs three fractions in [0, 1], got {fr}")
        fluid = (x[0] < fr[0]) & (x[1] < fr[1]) & (x[2] < fr[2])
    elif shape == "solid":
        fluid = np.zeros((n, n, n), dtype=bool)
    else:
        fluid = np.ones((n, n, n), dtype=bool)
    desc = {"shape": shape, **spec}
    return UnitCell(fluid.astype(np.uint8), scale, desc)


def porosity(cell: UnitCell) -> float:
    """Fraction of FLUID voxels."""
    return int(np.count_nonzero(cell.labels)) / cell.labels.size


def combined_porosity(m_p: float, m_c: float) -> float:
    """Total liquid fraction of the double-porosity medium."""
    for name, v in (("m_p", m_p), ("m_c", m_c)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    return m_c + (1.0 - m_c) * m_p


# -- connectivity --------------------------------------------------------------

def _find(parent: dict, a: int) -> int:
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


def periodic_label(mask: np.ndarray, connectivity: int = 1) -> tuple[np.ndarray, int]:
    """Label connected components of ``mask`` on the 3-torus.

    ``connectivity=1`` is face adjacency, ``3`` is face/edge/corner adjacency.
    Labels are 1..count in order of first appearance (C order); 0 is background.
    """
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(3, connectivity)
    labels, count = ndimage.label(mask, structure=structure)
    if count == 0:
        return labels, 0
    parent = {i: i for i in range(1, count + 1)}
    offsets = [np.array(o) - 1 for o in zip(*np.nonzero(structure))]
    for axis in range(3):
        # pairs of voxels adjacent across the periodic face of this axis
        for off in offsets:
            if off[axis] != 1:
                continue
            lo = labels.take(-1, axis=axis)
            hi = labels.take(0, axis=axis)
            shift = [int(o) for k, o in enumerate(off) if k != axis]
            hi = np.roll(hi, shift=[-s for s in shift], axis=(0, 1))
            both = (lo > 0) & (hi > 0)
            for a, b in set(zip(lo[both].tolist(), hi[both].tolist())):
                ra, rb = _find(parent, a), _find(parent, b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    roots = np.zeros(count + 1, dtype=np.int64)
    for i in range(1, count + 1):
        roots[i] = _find(parent, i)
    merged = roots[labels]
    # consecutive relabelling in order of first appearance
    flat = merged.ravel()
    uniq, first = np.unique(flat[flat > 0], return_index=True)
    order = uniq[np.argsort(first)]
    remap = np.zeros(count + 1, dtype=np.int64)
    remap[order] = np.arange(1, order.size + 1)
    return remap[merged], int(order.size)


@dataclass(frozen=True)
class ConnectivityReport:
    phase: str
    components: int
    percolates: tuple[bool, bool, bool]

    @property
    def connected(self) -> bool:
        """True if the phase percolates along at least one axis."""
        return any(self.percolates)

    def as_dict(self) -> dict:
        return {
            "phase": self.phase,
            "components": self.components,
            "percolates": list(self.percolates),
            "connected": self.connected,
        }


def connectivity(cell: UnitCell, phase: int = FLUID) -> ConnectivityReport:
    """Periodic face-connected components of a phase and per-axis percolation.

    A component percolates along axis k if it reaches its own periodic image
    shifted by one cell length along k. This is tested by labelling the cell
    doubled along k and checking whether a voxel and its image share a label.
    """
    mask = cell.labels == phase
    name = "FLUID" if phase == FLUID else "SOLID"
    _, count = periodic_label(mask)
    perc = []
    n = cell.n
    for k in range(3):
        if count == 0:
            perc.append(False)
            continue
        doubled = np.concatenate([mask, mask], axis=k)
        lab, _ = periodic_label(doubled)
        first = np.take(lab, range(n), axis=k)
        second = np.take(lab, range(n, 2 * n), axis=k)
        perc.append(bool(np.any((first > 0) & (first == second))))
    return ConnectivityReport(name, count, tuple(perc))


def require_solid_percolation(cell: UnitCell) -> ConnectivityReport:
    """Raise GeometryError unless the solid phase percolates along every axis."""
    rep = connectivity(cell, SOLID)
    if not all(rep.percolates):
        raise GeometryError(
            f"{cell.scale} cell: solid phase must percolate along all axes "
            f"for the elasticity problems, got percolation {rep.percolates}"
        )
    return rep


# -- voxel file ----------------------------------------------------------------

_MAGIC = "poroscale-cell"


def write_voxel_file(cell: UnitCell, path) -> Path:
    """Header ``poroscale-cell v1 <n> <PORE|CRACK>`` then n^3 ASCII '0'/'1', x fastest."""
    path = Path(path)
    body = cell.labels.ravel(order="F") + ord("0")
    with open(path, "wb") as fh:
        fh.write(f"{_MAGIC} v1 {cell.n} {cell.scale}\n".encode("ascii"))
        fh.write(body.astype(np.uint8).tobytes())
    return path


def read_voxel_file(path) -> UnitCell:
    """Read a voxel file. Body bytes may be ASCII '0'/'1' or raw 0/1."""
    path = Path(path)
    data = path.read_bytes()
    head, sep, body = data.partition(b"\n")
    if not sep:
        raise GeometryError(f"{path}: missing header line")
    parts = head.decode("ascii", errors="replace").split()
    if len(parts) != 4 or parts[0] != _MAGIC or parts[1] != "v1":
        raise GeometryError(f"{path}: bad header {head[:60]!r}")
    try:
        n = int(parts[2])
    except ValueError:
        raise GeometryError(f"{path}: bad resolution {parts[2]!r}") from None
    scale = parts[3]
    raw = np.frombuffer(body, dtype=np.uint8)
    if raw.size == n**3 + 1 and raw[-1] == ord("\n"):
        raw = raw[:-1]
    if raw.size != n**3:
        raise GeometryError(f"{path}: expected {n**3} voxels, found {raw.size}")
    if np.all(np.isin(raw, (ord("0"), ord("1")))):
        raw = raw - ord("0")
    elif not np.all(np.isin(raw, (0, 1))):
        raise GeometryError(f"{path}: voxel bytes must be 0/1")
    labels = raw.reshape((n, n, n), order="F")
    return UnitCell(labels, scale, {"shape": "voxel-file", "path": str(path)})
