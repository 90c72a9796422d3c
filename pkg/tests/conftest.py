import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from poroscale import tensor as tn
from poroscale.cellgeom import CRACK, PORE, build_cell
from poroscale.elasticell import assemble_Ac, solve_crack_cell, solve_pore_cell
from poroscale.upscale import UpscaleConfig, run_pipeline

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_sym(rng) -> np.ndarray:
    """Random symmetric matrix in Voigt form."""
    M = rng.standard_normal((3, 3))
    return tn.pack(0.5 * (M + M.T))


@pytest.fixture(scope="session")
def sphere_pore():
    cell = build_cell({"shape": "sphere", "radius": 0.3}, 8, PORE)
    return solve_pore_cell(cell, tol=1e-10)


@pytest.fixture(scope="session")
def sphere_Ac(sphere_pore):
    return assemble_Ac(sphere_pore)[2]


@pytest.fixture(scope="session")
def tube_crack(sphere_Ac):
    cell = build_cell({"shape": "tube", "axis": "x", "radius": 0.3}, 8, CRACK)
    return solve_crack_cell(cell, sphere_Ac, tol=1e-10)


@pytest.fixture(scope="session")
def small_config():
    return UpscaleConfig(pore={"shape": "sphere", "radius": 0.3}, n_pore=8,
                         crack={"shape": "tube", "axis": "xyz", "radius": 0.2}, n_crack=8,
                         tol=1e-9)


@pytest.fixture(scope="session")
def small_coeffs(small_config):
    return run_pipeline(small_config)
