"""
Command-line entry point.

    poroscale <subcommand> [--config FILE] [--set section.key=value ...] [--out DIR]

Subcommands: cell-stokes, cell-elastic, upscale, macro, rigid-limit, verify.
Exit codes: 0 success, 1 validation or configuration error, 2 solver failure.
Every numeric result is also echoed to stdout as JSON.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .cellgeom import CRACK, PORE, GeometryError, build_cell
from .linsolve import SolverError
from .upscale import CASE_I, EffectiveCoefficients, PipelineError, UpscaleConfig, _jsonable, \
    run_pipeline

log = logging.getLogger("poroscale")

SUBCOMMANDS = ("cell-stokes", "cell-elastic", "upscale", "macro", "rigid-limit", "verify")
EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER = 0, 1, 2


class ConfigError(ValueError):
    pass


def _finite(v: str) -> float:
    x = float(v)
    if not math.isfinite(x):
        raise ValueError("must be finite")
    return x


def _mu(v: str) -> float:
    if v.strip().lower() == "inf":
        return math.inf
    return _finite(v)


def _floats(v: str) -> tuple:
    return tuple(_finite(p) for p in v.replace(",", " ").split())


def _choice(*options):
    def parse(v: str) -> str:
        v = v.strip()
        if v not in options:
            raise ValueError(f"expected one of {options}")
        return v
    return parse


_SHAPE_KEYS = {
    "shape": (_choice("slab", "tube", "sphere", "plates", "solid", "fluid", "voxel-file"), None),
    "n": (int, 16),
    "axis": (_choice("x", "y", "z", "xy", "xz", "yz", "xyz"), "z"),
    "fraction": (_finite, 0.5),
    "radius": (_finite, 0.25),
    "fractions": (_floats, (1.0, 1.0, 0.5)),
    "path": (str, ""),
}

SCHEMA = {
    "pore": dict(_SHAPE_KEYS),
    "crack": dict(_SHAPE_KEYS),
    "physics": {
        "mu1": (_mu, 1.0),
        "lambda0": (_finite, 1.0),
        "rho_f": (_finite, 1.0),
        "rho_s": (_finite, 2.0),
    },
    "solver": {
        "tol": (_finite, 1e-9),
        "macro_tol": (_finite, 1e-8),
        "threads": (int, 1),
        "saddle": (_choice("minres", "uzawa"), "minres"),
        "stabilization": (_finite, 0.0),
        "macro_stabilization": (_finite, 0.1),
    },
    "macro": {
        "n": (int, 8),
        "dt": (_finite, 0.1),
        "t_end": (_finite, 1.0),
        "force": (_choice("none", "constant", "rotational", "gradient"), "rotational"),
        "force_vector": (_floats, (0.0, 0.0, -1.0)),
        "hessian": (_floats, (0.0,) * 9),
        "ramp": (_finite, 0.0),
        "coefficients": (str, ""),
        "vtk_stride": (int, 0),
    },
    "rigid_limit": {
        "lambda0": (_floats, (1e2, 1e4, 1e6)),
    },
    "output": {
        "dir": (str, "poroscale-out"),
    },
}


@dataclass
class RunConfig:
    command: str
    values: dict  # section -> key -> parsed value
    present: dict  # section -> set of keys given explicitly

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def outdir(self) -> Path:
        return Path(self.get("output", "dir"))

    def shape_spec(self, section: str) -> dict:
        v = self.values[section]
        if "shape" not in self.present[section]:
            raise ConfigError(f"{section}.shape is required")
        shape = v["shape"]
        spec = {"shape": shape}
        if shape == "slab":
            if len(v["axis"]) != 1:
                raise ConfigError(f"{section}.axis: a slab needs a single axis, got {v['axis']!r}")
            spec.update(axis=v["axis"], fraction=v["fraction"])
        elif shape == "tube":
            spec.update(axis=v["axis"], radius=v["radius"])
        elif shape == "sphere":
            spec.update(radius=v["radius"])
        elif shape == "plates":
            if len(v["fractions"]) != 3:
                raise ConfigError(f"{section}.fractions needs three values")
            spec.update(fractions=list(v["fractions"]))
        elif shape == "voxel-file":
            if not v["path"]:
                raise ConfigError(f"{section}.path is required for voxel-file cells")
            if not Path(v["path"]).is_file():
                raise ConfigError(f"{section}.path: file not found: {v['path']}")
            spec.update(path=v["path"])
        return spec

    def n_of(self, section: str):
        if self.values[section]["shape"] == "voxel-file" and "n" not in self.present[section]:
            return None
        return self.values[section]["n"]

    def upscale_config(self) -> UpscaleConfig:
        return UpscaleConfig(
            pore=self.shape_spec("pore"), crack=self.shape_spec("crack"),
            n_pore=self.n_of("pore"), n_crack=self.n_of("crack"),
            mu1=self.get("physics", "mu1"), lambda0=self.get("physics", "lambda0"),
            rho_f=self.get("physics", "rho_f"), rho_s=self.get("physics", "rho_s"),
            tol=self.get("solver", "tol"), threads=self.get("solver", "threads"),
            saddle=self.get("solver", "saddle"),
            stabilization=self.get("solver", "stabilization"),
        )


def load_config(command: str, path: str | None, overrides=()) -> RunConfig:
    """Parse an INI file plus ``section.key=value`` overrides against the schema."""
    raw: dict = {s: {} for s in SCHEMA}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
        cp.optionxform = str
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(p)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in cp.items(section):
                raw[section][key] = value
    for item in overrides:
        key_path, sep, value = item.partition("=")
        section, dot, key = key_path.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section in override {key_path!r}")
        raw[section][key] = value
    values, present = {}, {}
    for section, keys in SCHEMA.items():
        values[section], present[section] = {}, set()
        for key in raw[section]:
            if key not in keys:
                raise ConfigError(f"unknown config key {section}.{key}")
        for key, (parse, default) in keys.items():
            if key in raw[section]:
                text = raw[section][key]
                if text.strip().lower() in ("inf", "+inf", "infinity") and parse is not _mu:
                    raise ConfigError(f"{section}.{key}: 'inf' is only accepted for physics.mu1")
                try:
                    values[section][key] = parse(text)
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: invalid value {text!r} ({exc})") from None
                present[section].add(key)
            else:
                values[section][key] = default
    return RunConfig(command, values, present)


# -- helpers --------------------------------------------------------------------

def _dump_json(obj, path: Path | None = None) -> str:
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    return text


def _echo(obj):
    sys.stdout.write(_dump_json(obj))
    sys.stdout.flush()


def _force(cfg: RunConfig):
    from .macrosolve import constant_force, gradient_force, rotational_force, zero_force
    kind = cfg.get("macro", "force")
    ramp = cfg.get("macro", "ramp")
    if ramp < 0:
        raise ConfigError("macro.ramp must be >= 0")
    if kind == "none":
        return zero_force()
    if kind == "rotational":
        return rotational_force(ramp)
    vec = cfg.get("macro", "force_vector")
    if len(vec) != 3:
        raise ConfigError("macro.force_vector needs three values")
    if kind == "constant":
        return constant_force(vec, ramp)
    H = cfg.get("macro", "hessian")
    if len(H) != 9:
        raise ConfigError("macro.hessian needs nine values")
    return gradient_force(vec, np.reshape(H, (3, 3)), ramp)


def _coefficients(cfg: RunConfig) -> EffectiveCoefficients:
    path = cfg.get("macro", "coefficients")
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"macro.coefficients: file not found: {path}")
        try:
            coeffs = EffectiveCoefficients.from_dict(json.loads(p.read_text()))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"macro.coefficients: malformed coefficient file ({exc})") from exc
        # physics keys given explicitly override the stored values
        for key in ("mu1", "lambda0"):
            if key in cfg.present["physics"]:
                setattr(coeffs, key, cfg.get("physics", key))
        if "mu1" in cfg.present["physics"] and math.isinf(coeffs.mu1):
            coeffs.regime = CASE_I
        return coeffs
    return run_pipeline(cfg.upscale_config())


def _macro_config(cfg: RunConfig, coeffs: EffectiveCoefficients):
    from .macrosolve import MacroConfig
    return MacroConfig(
        coeffs, N=cfg.get("macro", "n"), dt=cfg.get("macro", "dt"), T=cfg.get("macro", "t_end"),
        lambda0=coeffs.lambda0, mu1=coeffs.mu1, force=_force(cfg),
        tol=cfg.get("solver", "macro_tol"),
        stabilization=cfg.get("solver", "macro_stabilization"),
        saddle=cfg.get("solver", "saddle"), threads=cfg.get("solver", "threads"),
    )


# -- subcommands ------------------------------------------------------------------

def cmd_cell_stokes(cfg: RunConfig) -> dict:
    from .export import stokes_fields, write_vtk
    from .stokescell import compute_Bc
    cell = build_cell(cfg.shape_spec("crack"), cfg.n_of("crack"), CRACK)
    res = compute_Bc(cell, cfg.get("solver", "tol"), cfg.get("solver", "threads"),
                     cfg.get("solver", "saddle"))
    out = cfg.outdir
    result = {"crack_geometry": cell.description, "n": cell.n, **res.as_dict()}
    _dump_json(result, out / "permeability.json")
    if res.solution is not None:
        for sol in res.solution.axes:
            for name, arr in stokes_fields(sol, res.solution.system).items():
                write_vtk(out / f"stokes_{'xyz'[sol.axis]}_{name}_00000.vtk", name, arr, cell.h)
    return result


def cmd_cell_elastic(cfg: RunConfig) -> dict:
    from .cellgeom import require_solid_percolation
    from .elasticell import assemble_Ac, assemble_bundle, identity_suite, solve_crack_cell, \
        solve_pore_cell
    tol, threads = cfg.get("solver", "tol"), cfg.get("solver", "threads")
    pc = build_cell(cfg.shape_spec("pore"), cfg.n_of("pore"), PORE)
    cc = build_cell(cfg.shape_spec("crack"), cfg.n_of("crack"), CRACK)
    require_solid_percolation(pc)
    require_solid_percolation(cc)
    pore = solve_pore_cell(pc, tol, threads, cfg.get("solver", "stabilization"),
                           cfg.get("solver", "saddle"))
    _, _, A_c = assemble_Ac(pore)
    rep = tn.spd_report(A_c)
    if not rep.spd:
        raise ValueError(f"A_c is not SPD (defect {rep.symmetry_defect:.2e}, min_eig {rep.min_eig:.2e})")
    crack = solve_crack_cell(cc, A_c, tol, threads)
    bundle = assemble_bundle(pore, crack)
    result = {"m_p": pore.m_p, "m_c": crack.m_c, **bundle.as_dict(),
              "identities": identity_suite(pore, crack, A_c)}
    _dump_json(result, cfg.outdir / "stiffness.json")
    return result


def cmd_upscale(cfg: RunConfig) -> dict:
    coeffs = run_pipeline(cfg.upscale_config())
    out = cfg.outdir
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_coefficients.json").write_text(coeffs.to_json())
    return coeffs.as_dict()


def cmd_macro(cfg: RunConfig) -> dict:
    from .export import export_fields, write_csv
    from .macrosolve import TIME_SERIES_COLUMNS, run_case1, run_case2
    coeffs = _coefficients(cfg)
    mcfg = _macro_config(cfg, coeffs)
    series = run_case1(mcfg) if coeffs.regime == CASE_I else run_case2(mcfg)
    out = cfg.outdir
    out.mkdir(parents=True, exist_ok=True)
    rows = series.rows()
    write_csv(out / "timeseries.csv", rows, TIME_SERIES_COLUMNS)
    stride = cfg.get("macro", "vtk_stride")
    if stride > 0:
        export_fields(series.states, series.mesh, out / "vtk", "macro", "vtk-legacy", stride)
    result = {"regime": coeffs.regime, "case": series.case, "energy": series.energy,
              "final": rows[-1], "steps": len(rows) - 1}
    _dump_json(result, out / "macro.json")
    return result


def cmd_rigid_limit(cfg: RunConfig) -> dict:
    from .export import write_csv
    from .macrosolve import RIGID_LIMIT_COLUMNS, rigid_limit_study
    coeffs = _coefficients(cfg)
    mcfg = _macro_config(cfg, coeffs)
    table = rigid_limit_study(mcfg, cfg.get("rigid_limit", "lambda0"), cfg.get("solver", "threads"))
    out = cfg.outdir
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "rigid_limit.csv", table, RIGID_LIMIT_COLUMNS)
    result = {"table": table}
    _dump_json(result, out / "rigid_limit.json")
    return result


def cmd_verify(cfg: RunConfig) -> dict:
    from .verify import run_checks
    checks = run_checks(threads=cfg.get("solver", "threads"))
    result = {"checks": checks, "passed": all(c["passed"] for c in checks)}
    _dump_json(result, cfg.outdir / "verify.json")
    if not result["passed"]:
        failed = [c["name"] for c in checks if not c["passed"]]
        result["failed"] = failed
    return result


COMMANDS = {
    "cell-stokes": cmd_cell_stokes,
    "cell-elastic": cmd_cell_elastic,
    "upscale": cmd_upscale,
    "macro": cmd_macro,
    "rigid-limit": cmd_rigid_limit,
    "verify": cmd_verify,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_VALIDATION)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="poroscale", description="Double-porosity homogenization toolkit.")
    p.add_argument("command", choices=SUBCOMMANDS, metavar="command",
                   help="one of: " + ", ".join(SUBCOMMANDS))
    p.add_argument("--config", "-c", help="INI configuration file")
    p.add_argument("--set", "-s", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a configuration key (repeatable)")
    p.add_argument("--out", "-o", help="output directory (overrides output.dir)")
    p.add_argument("--threads", "-j", type=int, help="thread count (overrides solver.threads)")
    p.add_argument("--verbose", "-v", action="store_true")
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = list(args.set)
    if args.out:
        overrides.append(f"output.dir={args.out}")
    if args.threads is not None:
        overrides.append(f"solver.threads={args.threads}")
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.command, args.config, overrides)
        if cfg.get("solver", "threads") < 1:
            raise ConfigError("solver.threads must be >= 1")
        result = COMMANDS[args.command](cfg)
    except PipelineError as exc:
        sys.stderr.write(f"poroscale: {exc}\n")
        return EXIT_VALIDATION if exc.is_validation else EXIT_SOLVER
    except SolverError as exc:
        sys.stderr.write(f"poroscale: solver failure: {exc}\n")
        return EXIT_SOLVER
    except (ConfigError, GeometryError, ValueError, OSError) as exc:
        sys.stderr.write(f"poroscale: {exc}\n")
        return EXIT_VALIDATION
    log.info("%s finished in %.2f s", args.command, time.perf_counter() - t0)
    _echo(result)
    if args.command == "verify" and not result["passed"]:
        return EXIT_VALIDATION
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
