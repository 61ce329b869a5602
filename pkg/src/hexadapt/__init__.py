"""Adaptive hexahedral corotational FEM with needle-tissue interaction."""

__version__ = "0.1.0"

from .adaptivity import RefinementHistory, build_T, detect_t_junctions, get_template
from .beam import NeedleModel
from .config import ScenarioConfig, echo_config, load_config
from .errors import (
    ConfigError,
    ContactSolverError,
    DegenerateGeometryError,
    HexAdaptError,
    InvalidArgumentError,
    SolverError,
    StaleReferenceError,
)
from .estimator import ErrorEstimator, mark
from .fem import Material, TissueAssembler
from .mesh import HexMesh, build_grid
from .scenarios import RunReport, run_displacement_probe, run_lshape, run_phantom_insertion, run_sweep
from .simulation import InsertionSimulation

__all__ = [
    "ConfigError",
    "ContactSolverError",
    "DegenerateGeometryError",
    "ErrorEstimator",
    "HexAdaptError",
    "HexMesh",
    "InsertionSimulation",
    "InvalidArgumentError",
    "Material",
    "NeedleModel",
    "RefinementHistory",
    "RunReport",
    "ScenarioConfig",
    "SolverError",
    "StaleReferenceError",
    "TissueAssembler",
    "build_T",
    "build_grid",
    "detect_t_junctions",
    "echo_config",
    "get_template",
    "load_config",
    "mark",
    "run_displacement_probe",
    "run_lshape",
    "run_phantom_insertion",
    "run_sweep",
]
