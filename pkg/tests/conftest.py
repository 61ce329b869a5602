import numpy as np
import pytest

from hexadapt.fem import Material
from hexadapt.mesh import build_grid


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit_cube():
    return build_grid([0, 0, 0], [1, 1, 1], [1, 1, 1])


@pytest.fixture
def soft():
    return Material(1.0, 0.3, density=1.0, rayleigh_alpha=0.0, rayleigh_beta=0.0)


def random_hex(rng, jitter=0.15):
    """A non-degenerate hexahedron: perturbed unit cube, randomly scaled."""
    from hexadapt.mesh import CORNERS

    base = 0.5 * (CORNERS + 1.0)
    return base * rng.uniform(0.5, 2.0, 3) + rng.uniform(-jitter, jitter, (8, 3))


def random_rotation(rng):
    from scipy.spatial.transform import Rotation

    return Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()


# ------------------------------------------------------------ scenario runs
# Expensive runs are shared by the scenario and acceptance tests.


@pytest.fixture(scope="session")
def insert_cfg():
    from hexadapt.config import config_from_dict

    return config_from_dict({"scenario": "insert"})


@pytest.fixture(scope="session")
def coarse_run(insert_cfg):
    from hexadapt.scenarios import run_phantom_insertion

    return run_phantom_insertion(insert_cfg)


@pytest.fixture(scope="session")
def adaptive_run():
    from hexadapt.config import config_from_dict
    from hexadapt.scenarios import run_phantom_insertion

    return run_phantom_insertion(config_from_dict({"scenario": "insert", "adaptivity": {"mode": "adaptive"}}))


@pytest.fixture(scope="session")
def fine_run(insert_cfg):
    from hexadapt.scenarios import run_phantom_insertion

    # uniform level-1 refinement of the coarse grid, built directly
    return run_phantom_insertion(insert_cfg, resolution=(18, 8, 8))


@pytest.fixture(scope="session")
def retract_run():
    from hexadapt.config import config_from_dict
    from hexadapt.scenarios import run_phantom_insertion

    return run_phantom_insertion(config_from_dict({"scenario": "insert", "motion": {"retract": True}}))


@pytest.fixture(scope="session")
def lshape_run():
    from hexadapt.config import config_from_dict
    from hexadapt.scenarios import run_lshape

    return run_lshape(config_from_dict({"scenario": "lshape"}))


# ------------------------------------------------------ acceptance summary
ACCEPTANCE = {}


def record(number, title, ok, detail):
    ACCEPTANCE[number] = (title, bool(ok), detail)
    line = f"acceptance {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}: {detail}")
