"""Scenario configuration: typed blocks, YAML loading, validation and echo.

Every block is a dataclass whose defaults are the documented defaults.  A
config file only needs the keys it changes; ``load_config`` fills in the rest
and ``echo_config`` writes the complete, materialised configuration back out
so that ``load_config(echo_config(cfg)) == cfg``.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError

SCENARIOS = ("lshape", "insert", "probe")
MODES = ("fixed", "uniform", "adaptive")
FACES = ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max")
AXES = ("x", "y", "z")


@dataclass
class GeometryConfig:
    """Box ``origin + [0, extents]`` meshed with ``resolution`` elements.

    ``notch`` removes the block ``x < extents_x / 2, y > extents_y / 2``,
    giving the L-shaped domain.
    """

    origin: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    extents: list = field(default_factory=lambda: [0.04, 0.02, 0.02])
    resolution: list = field(default_factory=lambda: [9, 4, 4])
    notch: bool = False

    def validate(self, path):
        _vec(self.origin, f"{path}.origin", 3)
        _vec(self.extents, f"{path}.extents", 3)
        _vec(self.resolution, f"{path}.resolution", 3)
        if any(e <= 0 for e in self.extents):
            raise ConfigError(f"{path}.extents", "must be positive")
        if any(int(r) != r or r < 1 for r in self.resolution):
            raise ConfigError(f"{path}.resolution", "must be positive integers")


@dataclass
class MaterialConfig:
    young_modulus: float = 1.0e7
    poisson_ratio: float = 0.4
    density: float = 1000.0
    rayleigh_alpha: float = 0.1
    rayleigh_beta: float = 0.01

    def validate(self, path):
        if not self.young_modulus > 0:
            raise ConfigError(f"{path}.young_modulus", "must be > 0")
        if not 0 <= self.poisson_ratio < 0.5:
            raise ConfigError(f"{path}.poisson_ratio", "must lie in [0, 0.5)")
        if not self.density > 0:
            raise ConfigError(f"{path}.density", "must be > 0")
        for name in ("rayleigh_alpha", "rayleigh_beta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{path}.{name}", "must be >= 0")

    def build(self):
        from .fem import Material

        return Material(
            self.young_modulus, self.poisson_ratio, self.density, self.rayleigh_alpha, self.rayleigh_beta
        )


@dataclass
class NeedleConfig:
    """Straight needle along +x through the centre of the entry face.

    ``standoff`` is the initial distance between the tip and the entry face.
    """

    length: float = 0.032
    radius: float = 0.001
    segments: int = 16
    standoff: float = 0.001
    material: MaterialConfig = field(
        default_factory=lambda: MaterialConfig(5.0e10, 0.3, 7800.0, 0.0, 0.01)
    )

    def validate(self, path):
        for name in ("length", "radius"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{path}.{name}", "must be > 0")
        if self.segments < 1:
            raise ConfigError(f"{path}.segments", "must be >= 1")
        if self.standoff < 0:
            raise ConfigError(f"{path}.standoff", "must be >= 0")
        self.material.validate(f"{path}.material")


@dataclass
class BoundaryConfig:
    """Boundary conditions on named box faces.

    ``supports`` entries read ``"face:axis"`` and fix one displacement
    component on that face.  ``traction`` is a constant surface traction on
    ``traction_face`` (static runs only).
    """

    clamped: list = field(default_factory=lambda: ["x_max"])
    supports: list = field(default_factory=list)
    traction_face: typing.Optional[str] = None
    traction: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def validate(self, path):
        for i, f in enumerate(self.clamped):
            if f not in FACES:
                raise ConfigError(f"{path}.clamped[{i}]", f"unknown face {f!r}")
        for i, s in enumerate(self.supports):
            face, _, axis = str(s).partition(":")
            if face not in FACES or axis not in AXES:
                raise ConfigError(f"{path}.supports[{i}]", f"expected 'face:axis', got {s!r}")
        if self.traction_face is not None and self.traction_face not in FACES:
            raise ConfigError(f"{path}.traction_face", f"unknown face {self.traction_face!r}")
        _vec(self.traction, f"{path}.traction", 3)


@dataclass
class ContactConfig:
    mu_surface: float = 0.8
    mu_shaft: float = 0.5
    puncture_strength: float = 10.0
    cut_strength: typing.Optional[float] = None
    shaft_grip: float = 300.0
    shaft_spacing: typing.Optional[float] = None
    cut_advance: typing.Optional[float] = None
    tolerance: float = 1e-6
    max_iterations: int = 200

    def validate(self, path):
        for name in ("mu_surface", "mu_shaft", "puncture_strength", "shaft_grip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{path}.{name}", "must be >= 0")
        for name in ("cut_strength",):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{path}.{name}", "must be >= 0")
        for name in ("shaft_spacing", "cut_advance"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{path}.{name}", "must be > 0")
        if not self.tolerance > 0:
            raise ConfigError(f"{path}.tolerance", "must be > 0")
        if self.max_iterations < 1:
            raise ConfigError(f"{path}.max_iterations", "must be >= 1")


@dataclass
class AdaptivityConfig:
    """Exactly one refinement mode: ``fixed``, ``uniform`` (``uniform_level``
    passes of ``template`` over the whole mesh) or ``adaptive``."""

    mode: str = "fixed"
    uniform_level: int = 1
    template: str = "2x2x2"
    theta: float = 0.3
    cadence: int = 1
    max_level: int = 1

    def validate(self, path):
        if self.mode not in MODES:
            raise ConfigError(f"{path}.mode", f"must be one of {MODES}")
        from .adaptivity import builtin_templates

        if self.template not in builtin_templates():
            raise ConfigError(f"{path}.template", f"unknown template {self.template!r}")
        if not 0 < self.theta < 1:
            raise ConfigError(f"{path}.theta", "must lie in (0, 1)")
        if self.cadence < 1:
            raise ConfigError(f"{path}.cadence", "must be >= 1")
        if self.uniform_level < 0:
            raise ConfigError(f"{path}.uniform_level", "must be >= 0")
        if self.max_level < 0:
            raise ConfigError(f"{path}.max_level", "must be >= 0")


@dataclass
class IntegratorConfig:
    time_step: float = 0.01
    solver_tolerance: float = 1e-8

    def validate(self, path):
        if not self.time_step > 0:
            raise ConfigError(f"{path}.time_step", "must be > 0")
        if not self.solver_tolerance > 0:
            raise ConfigError(f"{path}.solver_tolerance", "must be > 0")


@dataclass
class MotionConfig:
    """Base motion: advance ``standoff + depth`` at ``speed``, optionally
    return to the start at the same speed."""

    speed: float = 0.01
    depth: float = 0.010
    retract: bool = False

    def validate(self, path):
        if not self.speed > 0:
            raise ConfigError(f"{path}.speed", "must be > 0")
        if not self.depth > 0:
            raise ConfigError(f"{path}.depth", "must be > 0")


@dataclass
class LShapeConfig:
    uniform_passes: int = 4
    adaptive_passes: int = 8
    target_error: float = 0.08
    iterative_above: int = 30000

    def validate(self, path):
        if self.uniform_passes < 1:
            raise ConfigError(f"{path}.uniform_passes", "must be >= 1")
        if self.adaptive_passes < 0:
            raise ConfigError(f"{path}.adaptive_passes", "must be >= 0")
        if not 0 < self.target_error < 1:
            raise ConfigError(f"{path}.target_error", "must lie in (0, 1)")


@dataclass
class ProbeConfig:
    """Pause the insertion at ``depth`` and sample ``|u|`` on a line along
    ``axis`` through the tip, for each entry of ``modes``."""

    depth: float = 0.006
    axis: str = "z"
    samples: int = 41
    modes: list = field(default_factory=lambda: ["unrefined", "2x3x3", "3x3x3", "full"])
    full_resolution: list = field(default_factory=lambda: [18, 8, 8])

    def validate(self, path):
        if not self.depth > 0:
            raise ConfigError(f"{path}.depth", "must be > 0")
        if self.axis not in AXES:
            raise ConfigError(f"{path}.axis", f"must be one of {AXES}")
        if self.samples < 2:
            raise ConfigError(f"{path}.samples", "must be >= 2")
        from .adaptivity import builtin_templates

        for i, m in enumerate(self.modes):
            if m not in ("unrefined", "full") and m not in builtin_templates():
                raise ConfigError(f"{path}.modes[{i}]", f"unknown probe mode {m!r}")
        _vec(self.full_resolution, f"{path}.full_resolution", 3)


@dataclass
class OutputConfig:
    directory: str = "out"
    dump_mesh_every: int = 0

    def validate(self, path):
        if self.dump_mesh_every < 0:
            raise ConfigError(f"{path}.dump_mesh_every", "must be >= 0")


@dataclass
class ScenarioConfig:
    scenario: str = "insert"
    seed: int = 0
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    tissue: MaterialConfig = field(default_factory=MaterialConfig)
    needle: NeedleConfig = field(default_factory=NeedleConfig)
    boundary: BoundaryConfig = field(default_factory=BoundaryConfig)
    contact: ContactConfig = field(default_factory=ContactConfig)
    adaptivity: AdaptivityConfig = field(default_factory=AdaptivityConfig)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    lshape: LShapeConfig = field(default_factory=LShapeConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError("scenario", f"must be one of {SCENARIOS}")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v.validate(f.name)
        return self


def scenario_defaults(scenario):
    """Documented defaults as a plain dict for ``scenario``."""
    cfg = ScenarioConfig(scenario=scenario)
    if scenario == "lshape":
        cfg.geometry = GeometryConfig([0.0, 0.0, 0.0], [4.0, 4.0, 2.0], [8, 8, 4], notch=True)
        cfg.tissue = MaterialConfig(1.0e3, 0.3, 1.0, 0.0, 0.0)
        cfg.boundary = BoundaryConfig(["x_max"], ["y_max:y"], "x_min", [0.0, -1.0, 0.0])
        cfg.adaptivity = AdaptivityConfig(mode="adaptive", max_level=99)
    elif scenario == "probe":
        cfg.contact = ContactConfig(mu_shaft=0.9)
    return dataclasses.asdict(cfg)


def _vec(v, path, n):
    if not isinstance(v, (list, tuple)) or len(v) != n:
        raise ConfigError(path, f"expected a list of {n} numbers")
    for i, x in enumerate(v):
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise ConfigError(f"{path}[{i}]", f"expected a number, got {x!r}")


def _merge(base, over, path):
    out = dict(base)
    for k, v in over.items():
        p = f"{path}.{k}" if path else str(k)
        if k not in base:
            raise ConfigError(p, "unknown key")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(p, "expected a mapping")
            out[k] = _merge(base[k], v, p)
        else:
            out[k] = v
    return out


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return int(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if tp is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return [float(x) if isinstance(x, float) else x for x in value]
    return value


def _build(cls, data, path):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        p = f"{path}.{f.name}" if path else f.name
        v = data[f.name]
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, v, p)
        else:
            kwargs[f.name] = _coerce(tp, v, p)
    return cls(**kwargs)


def config_from_dict(data, scenario=None):
    """Merge ``data`` over the scenario defaults, then type-check and validate.

    ``scenario`` is required, either as a key of ``data`` or as the argument
    (the key wins).
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a mapping at top level")
    scenario = data.get("scenario", scenario)
    if scenario is None:
        raise ConfigError("scenario", "missing required field")
    if scenario not in SCENARIOS:
        raise ConfigError("scenario", f"must be one of {SCENARIOS}")
    merged = _merge(scenario_defaults(scenario), {**data, "scenario": scenario}, "")
    return _build(ScenarioConfig, merged, "").validate()


def load_config(path, scenario=None):
    """Read a YAML scenario file (see ``docs/config.md`` for the schema).

    ``scenario`` fills in a missing ``scenario`` key.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read file: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from exc
    return config_from_dict(data, scenario)


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def echo_config(cfg):
    """Complete configuration as YAML text."""
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def loads_config(text):
    return config_from_dict(yaml.safe_load(text))
