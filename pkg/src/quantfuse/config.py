"""Run configuration: defaults, strict parsing, CLI overrides.

Configuration files are JSON with one section per concern; unknown keys are
rejected so typos fail fast instead of silently running with defaults.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .admm import AdmmConfig
from .exceptions import ConfigError

__all__ = [
    "RunConfig",
    "SplineConfig",
    "LambdaConfig",
    "ScadConfig",
    "SelectionConfig",
    "InferenceConfig",
    "SimulationConfig",
    "OutputConfig",
    "load_config",
]


@dataclass
class SplineConfig:
    order: int = 4
    interior: object = "auto"  # interior knot count, or "auto" for the H rule

    def validate(self):
        if self.order < 1:
            raise ConfigError("spline order must be >= 1")
        if self.interior != "auto":
            if not isinstance(self.interior, int) or self.interior < 0:
                raise ConfigError("spline interior must be 'auto' or a nonnegative integer")


@dataclass
class LambdaConfig:
    max: object = "auto"  # top of the penalty grid, or "auto" from the lam=0 fit
    grid_size: int = 30
    spacing: str = "linear"
    min_ratio: float = 0.01
    refine: bool = True   # bisect the fusion transition adaptively

    def validate(self):
        if self.max != "auto" and (not isinstance(self.max, (int, float)) or self.max <= 0):
            raise ConfigError("lambda max must be 'auto' or a positive number")
        if self.grid_size < 1:
            raise ConfigError("lambda grid size must be >= 1")
        if self.spacing not in ("linear", "log"):
            raise ConfigError("lambda spacing must be 'linear' or 'log'")
        if not 0 < self.min_ratio < 1:
            raise ConfigError("lambda min_ratio must be in (0, 1)")


@dataclass
class ScadConfig:
    a: float = 3.7

    def validate(self):
        if self.a <= 2:
            raise ConfigError("SCAD shape parameter must exceed 2")


@dataclass
class SelectionConfig:
    k_max: int = 10
    polish: bool = True   # reassignment fixed point + merge ladder candidates
    ladder_beam: int = 2

    def validate(self):
        if self.k_max < 1:
            raise ConfigError("k_max must be >= 1")
        if self.ladder_beam < 1:
            raise ConfigError("ladder_beam must be >= 1")


@dataclass
class InferenceConfig:
    enabled: bool = True
    level: float = 0.95
    grid_size: int = 99
    density: str = "nw"
    floor: float = 1e-3

    def validate(self):
        if not 0 < self.level < 1:
            raise ConfigError("confidence level must be in (0, 1)")
        if self.grid_size < 1:
            raise ConfigError("inference grid size must be >= 1")
        if self.density not in ("nw", "rnw"):
            raise ConfigError("density method must be 'nw' or 'rnw'")
        if self.floor <= 0:
            raise ConfigError("density floor must be positive")


@dataclass
class SimulationConfig:
    experiment: int = 1
    n: int = 60
    T: int = 100
    replications: int = 100
    coverage: bool = True
    coverage_x: list = field(default_factory=lambda: [0.2, 0.5, 0.8])
    workers: int = 0  # 0: one process per available CPU

    def validate(self):
        if self.experiment not in (1, 2, 3, 4):
            raise ConfigError(f"unknown experiment id {self.experiment}")
        if self.n < 2 or self.T < 2:
            raise ConfigError("simulation needs n >= 2 and T >= 2")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if any(not 0 < x < 1 for x in self.coverage_x):
            raise ConfigError("coverage grid points must be in (0, 1)")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")


@dataclass
class OutputConfig:
    dir: str = "."
    figures: bool = True

    def validate(self):
        pass


@dataclass
class RunConfig:
    seed: int = 12345
    tau: list = field(default_factory=lambda: [0.5])
    spline: SplineConfig = field(default_factory=SplineConfig)
    lam: LambdaConfig = field(default_factory=LambdaConfig)
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    scad: ScadConfig = field(default_factory=ScadConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "RunConfig":
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if not self.tau or any(not 0 < t < 1 for t in self.tau):
            raise ConfigError("tau values must lie in (0, 1)")
        for section in (self.spline, self.lam, self.scad, self.selection,
                        self.inference, self.simulation, self.output):
            section.validate()
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["lambda"] = out.pop("lam")
        return out


_SECTIONS = {
    "spline": SplineConfig,
    "lambda": LambdaConfig,
    "admm": AdmmConfig,
    "scad": ScadConfig,
    "selection": SelectionConfig,
    "inference": InferenceConfig,
    "simulation": SimulationConfig,
    "output": OutputConfig,
}
_SECTION_ATTR = {"lambda": "lam"}


def _build_section(cls, data: dict, name: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    """Build and validate a RunConfig from a plain dict (strict keys)."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    allowed = {"seed", "tau"} | set(_SECTIONS)
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = RunConfig()
    if "seed" in data:
        cfg.seed = data["seed"]
    if "tau" in data:
        tau = data["tau"]
        cfg.tau = list(tau) if isinstance(tau, (list, tuple)) else [tau]
    for name, cls in _SECTIONS.items():
        if name in data:
            section = _build_section(cls, dict(data[name]), name)
            setattr(cfg, _SECTION_ATTR.get(name, name), section)
    return cfg.validate()


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config file (optional) and apply CLI overrides on top."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if overrides:
        for key, value in overrides.items():
            if value is None:
                continue
            parts = key.split(".")
            node = data
            for part in parts[:-1]:
                node = node.setdefault(part, {})
                if not isinstance(node, dict):
                    raise ConfigError(f"cannot override non-section key '{key}'")
            node[parts[-1]] = value
    return config_from_dict(data)
