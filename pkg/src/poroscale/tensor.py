"""
Symmetric second-rank and fourth-rank tensors in a fixed Voigt convention.

Symmetric 3x3 matrices are stored as 6-vectors ordered (11, 22, 33, 23, 13, 12)
with raw components (no sqrt(2) scaling). Fourth-rank tensors with minor
symmetries are stored as general 6x6 arrays, ``T[a, b] = A_(a)(b)``. The shear
weight 2 is applied only inside :func:`contract`, which makes
``(A:zeta)_a = sum_b T[a, b] * w_b * zeta_b`` equal to the full index sum
``A_ijkl zeta_kl``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))
WEIGHTS = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])

_INDEX = np.empty((3, 3), dtype=int)
for _a, (_i, _j) in enumerate(VOIGT_PAIRS):
    _INDEX[_i, _j] = _INDEX[_j, _i] = _a


def voigt_index(i: int, j: int) -> int:
    """Voigt slot of the zero-based index pair (i, j)."""
    return int(_INDEX[i, j])


def pack(m: np.ndarray) -> np.ndarray:
    """Symmetric 3x3 matrix -> 6-vector. The upper triangle is read."""
    m = np.asarray(m, dtype=float)
    return np.array([m[i, j] for i, j in VOIGT_PAIRS])


def unpack(v: np.ndarray) -> np.ndarray:
    """6-vector -> symmetric 3x3 matrix."""
    v = np.asarray(v, dtype=float)
    if v.shape != (6,):
        raise ValueError(f"expected 6 Voigt components, got shape {v.shape}")
    return v[_INDEX]


def trace(v: np.ndarray) -> float:
    return float(v[0] + v[1] + v[2])


def ddot(a: np.ndarray, b: np.ndarray) -> float:
    """Full scalar product a:b of two symmetric matrices in Voigt form."""
    return float(np.dot(WEIGHTS * a, b))


def identity2() -> np.ndarray:
    return np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])


def jij_basis(i: int, j: int) -> np.ndarray:
    """J^ij = (e_i (x) e_j + e_j (x) e_i) / 2 for one-based axis indices."""
    if i not in (1, 2, 3) or j not in (1, 2, 3):
        raise ValueError(f"axis indices must be in 1..3, got ({i}, {j})")
    m = np.zeros((3, 3))
    m[i - 1, j - 1] += 0.5
    m[j - 1, i - 1] += 0.5
    return pack(m)


def voigt_basis() -> list[tuple[int, int]]:
    """The six distinct one-based index pairs in Voigt order."""
    return [(i + 1, j + 1) for i, j in VOIGT_PAIRS]


def contract(A: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    """A : zeta, returned as a Voigt 6-vector."""
    return np.asarray(A) @ (WEIGHTS * np.asarray(zeta))


def outer(B: np.ndarray, C: np.ndarray) -> np.ndarray:
    """B (x) C with (B (x) C) : X = B (C : X)."""
    return np.outer(B, C)


def compose(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """A : B, the tensor acting as zeta -> A : (B : zeta)."""
    return np.asarray(A) @ (WEIGHTS[:, None] * np.asarray(B))


def sym_identity4() -> np.ndarray:
    """The symmetric identity J = sum_ij J^ij (x) J^ij."""
    return np.diag([1.0, 1.0, 1.0, 0.5, 0.5, 0.5])


def identity_outer() -> np.ndarray:
    """I (x) I."""
    return outer(identity2(), identity2())


def quadratic_form(A: np.ndarray, zeta: np.ndarray, eta: np.ndarray) -> float:
    """(A : zeta) : eta."""
    return ddot(contract(A, zeta), eta)


def weighted_form(A: np.ndarray) -> np.ndarray:
    """Matrix M with (A:zeta):eta = eta^T M zeta in raw Voigt components."""
    return WEIGHTS[:, None] * np.asarray(A) * WEIGHTS[None, :]


@dataclass(frozen=True)
class SpdReport:
    symmetric: bool
    symmetry_defect: float
    min_eig: float

    @property
    def spd(self) -> bool:
        return self.symmetric and self.min_eig > 0.0

    def as_dict(self) -> dict:
        return {
            "symmetric": self.symmetric,
            "symmetry_defect": self.symmetry_defect,
            "min_eig": self.min_eig,
        }


def spd_report(A: np.ndarray, tol: float = 1e-7) -> SpdReport:
    """Major symmetry and positivity of a fourth-rank tensor.

    The symmetry defect is ``max|T_ab - T_ba| / max|T|``, which vanishes
    exactly when the quadratic form (A:zeta):eta is symmetric in its
    arguments. ``min_eig`` is the smallest eigenvalue of the symmetric part
    of the stored 6x6 array; it has the same sign pattern as the quadratic
    form (congruence with the weighted form).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    T = np.asarray(A, dtype=float)
    scale = float(np.max(np.abs(T)))
    defect = float(np.max(np.abs(T - T.T))) / scale if scale > 0 else 0.0
    min_eig = float(np.linalg.eigvalsh(0.5 * (T + T.T))[0])
    return SpdReport(symmetric=defect <= tol, symmetry_defect=defect, min_eig=min_eig)


def to_list(A: np.ndarray) -> list[float]:
    """Row-major flat list for JSON output (36 entries for Tensor4, 6 for SymMat3)."""
    return [float(x) for x in np.asarray(A, dtype=float).ravel()]


def from_list(values, shape=(6, 6)) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"expected {int(np.prod(shape))} values, got {arr.size}")
    return arr.reshape(shape)
