"""Two-scale homogenization of double-porosity media: cell problems, effective
coefficients and the homogenized filtration solvers."""

from .cellgeom import CRACK, FLUID, PORE, SOLID, GeometryError, UnitCell, build_cell, \
    combined_porosity, connectivity, porosity
from .linsolve import SolverError
from .upscale import CASE_I, CASE_II, EffectiveCoefficients, PipelineError, UpscaleConfig, \
    coefficients_from_tensors, mixture_density, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "CASE_I", "CASE_II", "CRACK", "FLUID", "PORE", "SOLID",
    "EffectiveCoefficients", "GeometryError", "PipelineError", "SolverError", "UnitCell",
    "UpscaleConfig", "build_cell", "coefficients_from_tensors", "combined_porosity",
    "connectivity", "mixture_density", "porosity", "run_pipeline",
]
