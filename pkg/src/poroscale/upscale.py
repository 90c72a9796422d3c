"""
Two-scale coefficient pipeline.

geometry -> (Stokes on Z, pore elasticity on Y) -> A^(c) -> crack elasticity
on Z -> A^(s), with porosity and density bookkeeping and regime
classification. The Stokes and pore solves are independent and run
concurrently; the crack solves need A^(c).
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .cellgeom import CRACK, PORE, GeometryError, UnitCell, build_cell, combined_porosity, \
    connectivity, porosity, require_solid_percolation
from .elasticell import assemble_Ac, assemble_As, identity_suite, solve_crack_cell, \
    solve_pore_cell
from .linsolve import SolverError
from .stokescell import compute_Bc

log = logging.getLogger(__name__)

CASE_I = "CASE_I"
CASE_II = "CASE_II"


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it, ``cause`` is the original error."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def is_validation(self) -> bool:
        return isinstance(self.cause, (ValueError, GeometryError)) and \
            not isinstance(self.cause, SolverError)


def mixture_density(m: float, rho_f: float, rho_s: float) -> float:
    """rho_hat = m rho_f + (1 - m) rho_s."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"porosity m must lie in [0, 1], got {m}")
    return m * rho_f + (1.0 - m) * rho_s


def classify_regime(mu1: float, crack_fluid_percolates: bool) -> str:
    """CASE_I for infinite viscosity or disconnected cracks, CASE_II otherwise."""
    if math.isinf(mu1) or not crack_fluid_percolates:
        return CASE_I
    return CASE_II


@dataclass
class UpscaleConfig:
    pore: dict
    crack: dict
    n_pore: int = 16
    n_crack: int = 16
    mu1: float = 1.0
    lambda0: float = 1.0
    rho_f: float = 1.0
    rho_s: float = 2.0
    tol: float = 1e-9
    threads: int = 1
    saddle: str = "minres"
    stabilization: float = 0.0
    identities: bool = True

    def validate(self):
        if not (self.mu1 > 0):
            raise ValueError(f"physics.mu1 must be positive or inf, got {self.mu1}")
        if not (0 < self.lambda0 < math.inf):
            raise ValueError(f"physics.lambda0 must be finite and positive, got {self.lambda0}")
        for name in ("rho_f", "rho_s"):
            v = getattr(self, name)
            if not (0 <= v < math.inf):
                raise ValueError(f"physics.{name} must be finite and nonnegative, got {v}")
        if not (0 < self.tol < 1):
            raise ValueError(f"solver.tol must lie in (0, 1), got {self.tol}")
        if self.threads < 1:
            raise ValueError(f"solver.threads must be >= 1, got {self.threads}")


@dataclass
class EffectiveCoefficients:
    m_p: float
    m_c: float
    m: float
    rho_f: float
    rho_s: float
    rho_hat: float
    mu1: float
    lambda0: float
    B_c: np.ndarray
    A_c: np.ndarray
    A_s: np.ndarray
    regime: str
    diagnostics: dict = field(default_factory=dict)

    def check_invariants(self):
        if abs(self.m - combined_porosity(self.m_p, self.m_c)) > 1e-14:
            raise AssertionError("combined porosity invariant violated")
        if abs(self.rho_hat - mixture_density(self.m, self.rho_f, self.rho_s)) > 1e-14:
            raise AssertionError("mixture density invariant violated")

    def derived_velocities(self, v_s, v_c=None) -> dict:
        """Pore and mixture velocities from the skeleton (and crack) velocity.

        v_p = (1 - m_c) m_p v_s; v = v_c + (1 - m_c) v_s. Without v_c (Case I)
        the crack fluid moves with the skeleton, v_c = m_c v_s.
        """
        v_s = np.asarray(v_s, dtype=float)
        v_c = self.m_c * v_s if v_c is None else np.asarray(v_c, dtype=float)
        return {"v_p": (1.0 - self.m_c) * self.m_p * v_s, "v_c": v_c,
                "v": v_c + (1.0 - self.m_c) * v_s}

    def as_dict(self) -> dict:
        return {
            "porosities": {"m_p": self.m_p, "m_c": self.m_c, "m": self.m},
            "densities": {"rho_f": self.rho_f, "rho_s": self.rho_s, "rho_hat": self.rho_hat},
            "parameters": {"mu1": "inf" if math.isinf(self.mu1) else self.mu1,
                           "lambda0": self.lambda0},
            "regime": self.regime,
            "B_c": [float(x) for x in np.asarray(self.B_c).ravel()],
            "A_c": tn.to_list(self.A_c),
            "A_s": tn.to_list(self.A_s),
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.as_dict()), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EffectiveCoefficients":
        par = d.get("parameters", {})
        mu1 = par.get("mu1", 1.0)
        return cls(
            m_p=d["porosities"]["m_p"], m_c=d["porosities"]["m_c"], m=d["porosities"]["m"],
            rho_f=d["densities"]["rho_f"], rho_s=d["densities"]["rho_s"],
            rho_hat=d["densities"]["rho_hat"],
            mu1=math.inf if mu1 == "inf" else float(mu1), lambda0=float(par.get("lambda0", 1.0)),
            B_c=np.asarray(d["B_c"], dtype=float).reshape(3, 3),
            A_c=tn.from_list(d["A_c"]), A_s=tn.from_list(d["A_s"]),
            regime=d["regime"], diagnostics=d.get("diagnostics", {}),
        )


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except PipelineError:
        raise
    except (GeometryError, ValueError, SolverError, KeyError) as exc:
        raise PipelineError(name, exc) from exc


def _reports(d: dict) -> dict:
    return {("0" if k == "0" else f"{k[0]}{k[1]}"): r.as_dict() for k, r in d.items()}


def build_cells(cfg: UpscaleConfig) -> tuple[UnitCell, UnitCell]:
    pore = _stage("pore geometry", build_cell, cfg.pore, cfg.n_pore, PORE)
    crack = _stage("crack geometry", build_cell, cfg.crack, cfg.n_crack, CRACK)
    return pore, crack


def run_pipeline(cfg: UpscaleConfig) -> EffectiveCoefficients:
    """Solve every cell problem and return the verified effective coefficients.

    Failures are raised as :class:`PipelineError` naming the stage.
    """
    _stage("configuration", cfg.validate)
    pore_cell, crack_cell = build_cells(cfg)
    m_p, m_c = porosity(pore_cell), porosity(crack_cell)

    def pore_stage():
        if not pore_cell.fluid.any():
            raise GeometryError("pore cell has no fluid (m_p = 0): dilatation problem "
                                "infeasible on all-solid cell")
        require_solid_percolation(pore_cell)
        return solve_pore_cell(pore_cell, cfg.tol, cfg.threads, cfg.stabilization, cfg.saddle)

    def stokes_stage():
        return compute_Bc(crack_cell, cfg.tol, cfg.threads, cfg.saddle)

    _stage("crack geometry", lambda: require_solid_percolation(crack_cell)
           if crack_cell.fluid.any() else None)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=2) as pool:
            fut_stokes = pool.submit(_stage, "crack Stokes", stokes_stage)
            fut_pore = pool.submit(_stage, "pore elasticity", pore_stage)
            perm = fut_stokes.result()
            pore = fut_pore.result()
    else:
        perm = _stage("crack Stokes", stokes_stage)
        pore = _stage("pore elasticity", pore_stage)

    parts, C_p, A_c = assemble_Ac(pore)
    rep_c = tn.spd_report(A_c)
    if not rep_c.spd:
        raise PipelineError("pore elasticity", ValueError(
            f"A_c is not SPD (defect {rep_c.symmetry_defect:.2e}, min_eig {rep_c.min_eig:.2e})"))
    crack = _stage("crack elasticity", solve_crack_cell, crack_cell, A_c, cfg.tol, cfg.threads)
    C_c, A_s = assemble_As(crack, A_c, m_c)
    rep_s = tn.spd_report(A_s)
    if not rep_s.spd:
        raise PipelineError("crack elasticity", ValueError(
            f"A_s is not SPD (defect {rep_s.symmetry_defect:.2e}, min_eig {rep_s.min_eig:.2e})"))

    fluid_conn = perm.connectivity
    regime = classify_regime(cfg.mu1, fluid_conn.connected)
    m = combined_porosity(m_p, m_c)
    diag = {
        "pore": {
            "geometry": dict(pore_cell.description), "n": pore_cell.n,
            "solid_connectivity": connectivity(pore_cell, 0).as_dict(),
            "solves": _reports(pore.reports),
            "C_p": tn.to_list(C_p),
            "C_p_parts": [tn.to_list(c) for c in parts],
            "A_c_spd": rep_c.as_dict(),
        },
        "crack": {
            "geometry": dict(crack_cell.description), "n": crack_cell.n,
            "fluid_connectivity": fluid_conn.as_dict(),
            "stokes": perm.as_dict(),
            "solves": _reports(crack.reports),
            "C_c": tn.to_list(C_c),
            "A_s_spd": rep_s.as_dict(),
        },
        "tolerance": cfg.tol,
    }
    if cfg.identities:
        diag["identities"] = identity_suite(pore, crack, A_c)
    coeffs = EffectiveCoefficients(
        m_p=m_p, m_c=m_c, m=m, rho_f=cfg.rho_f, rho_s=cfg.rho_s,
        rho_hat=mixture_density(m, cfg.rho_f, cfg.rho_s), mu1=cfg.mu1, lambda0=cfg.lambda0,
        B_c=perm.B, A_c=A_c, A_s=A_s, regime=regime, diagnostics=diag,
    )
    coeffs.check_invariants()
    return coeffs


def coefficients_from_tensors(A_s, B_c=None, m_p: float = 0.3, m_c: float = 0.2,
                              rho_f: float = 1.0, rho_s: float = 2.0, mu1: float = 1.0,
                              lambda0: float = 1.0, A_c=None, regime: str | None = None
                              ) -> EffectiveCoefficients:
    """Coefficients assembled from given tensors rather than cell solves.

    Without an explicit regime, a nonzero B_c with finite mu1 means CASE_II.
    """
    B_c = np.zeros((3, 3)) if B_c is None else np.asarray(B_c, dtype=float)
    if regime is None:
        regime = classify_regime(mu1, bool(np.any(B_c != 0.0)))
    m = combined_porosity(m_p, m_c)
    A_s = np.asarray(A_s, dtype=float)
    c = EffectiveCoefficients(m_p, m_c, m, rho_f, rho_s, mixture_density(m, rho_f, rho_s),
                              mu1, lambda0, B_c, A_s if A_c is None else np.asarray(A_c, float),
                              A_s, regime, {"source": "tensors"})
    c.check_invariants()
    return c
