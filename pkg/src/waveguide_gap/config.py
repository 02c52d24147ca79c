"""Experiment configuration (versioned YAML)."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .geometry import CavernSpec, CrossSectionShape, GeometryError

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class CrossSectionConfig:
    kind: str = "rectangle"
    width: float = 1.0
    height: float = 1.0
    radius: float = 1.0
    anchor: Optional[list] = None

    def shape(self) -> CrossSectionShape:
        anchor = None if self.anchor is None else tuple(self.anchor)
        return CrossSectionShape(self.kind, width=self.width, height=self.height,
                                 radius=self.radius, anchor=anchor)


@dataclass
class CavernConfig:
    shape: str = "hemisphere"
    radius: float = 1.0
    extents: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    h: list = field(default_factory=lambda: [0.15, 0.2, 0.25, 0.3])

    def spec(self, h: float = 1.0) -> CavernSpec:
        return CavernSpec(self.shape, h=h, radius=self.radius, extents=tuple(self.extents))


@dataclass
class MeshConfig:
    cross_section_resolutions: list = field(default_factory=lambda: [32, 64])
    cell_resolution: int = 6
    refinement_levels: int = 2
    unperturbed_resolution: int = 20


@dataclass
class EtaGridConfig:
    n_uniform: int = 33
    n_refined: int = 17
    window_factor: float = 4.0


@dataclass
class SolverConfig:
    tol: float = 1e-8
    p_max: int = 3
    memory_cap: int = 2_000_000


@dataclass
class PolarizationConfig:
    truncation_factor: float = 8.0
    fit_factors: list = field(default_factory=lambda: [3.0, 4.0, 5.0])
    resolution: int = 4


@dataclass
class AsymptoticsConfig:
    beta0: float = 0.5
    h0: float = 0.3
    C_Lambda: Optional[float] = None


@dataclass
class OutputConfig:
    directory: str = "out"
    plots: bool = True
    dat: bool = False


_SECTIONS = {
    "cross_section": CrossSectionConfig,
    "cavern": CavernConfig,
    "mesh": MeshConfig,
    "eta_grid": EtaGridConfig,
    "solver": SolverConfig,
    "polarization": PolarizationConfig,
    "asymptotics": AsymptoticsConfig,
    "output": OutputConfig,
}


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    cross_section: CrossSectionConfig = field(default_factory=CrossSectionConfig)
    cavern: CavernConfig = field(default_factory=CavernConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    eta_grid: EtaGridConfig = field(default_factory=EtaGridConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    polarization: PolarizationConfig = field(default_factory=PolarizationConfig)
    asymptotics: AsymptoticsConfig = field(default_factory=AsymptoticsConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form (output location excluded)."""
        data = self.to_dict()
        data.pop("output")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "ExperimentConfig":
        data = dict(data or {})
        version = data.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        seed = data.pop("seed", 0)
        kwargs = {}
        for name, section in data.items():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown config section {name!r}")
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            known = {f.name for f in fields(_SECTIONS[name])}
            extra = set(section) - known
            if extra:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(extra)}")
            kwargs[name] = _SECTIONS[name](**section)
        cfg = cls(version=version, seed=int(seed), **kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def positive(value, what):
            if not (isinstance(value, (int, float)) and value > 0):
                raise ConfigError(f"{what} must be positive, got {value!r}")

        try:
            self.cross_section.shape()
            self.cavern.spec()
        except GeometryError as exc:
            raise ConfigError(str(exc)) from exc
        hs = list(self.cavern.h)
        for h in hs:
            positive(h, "cavern.h entries")
        if hs != sorted(hs):
            raise ConfigError("cavern.h must be ascending")
        for r in self.mesh.cross_section_resolutions:
            positive(r, "mesh.cross_section_resolutions")
        for name in ("cell_resolution", "unperturbed_resolution"):
            positive(getattr(self.mesh, name), f"mesh.{name}")
        if self.mesh.refinement_levels < 0:
            raise ConfigError("mesh.refinement_levels must be nonnegative")
        positive(self.eta_grid.n_uniform, "eta_grid.n_uniform")
        if self.eta_grid.n_refined < 0:
            raise ConfigError("eta_grid.n_refined must be nonnegative")
        positive(self.eta_grid.window_factor, "eta_grid.window_factor")
        positive(self.solver.tol, "solver.tol")
        positive(self.solver.p_max, "solver.p_max")
        positive(self.polarization.truncation_factor, "polarization.truncation_factor")
        for f in self.polarization.fit_factors:
            positive(f, "polarization.fit_factors")
        if len(self.polarization.fit_factors) < 2:
            raise ConfigError("polarization.fit_factors needs at least two entries")
        positive(self.polarization.resolution, "polarization.resolution")
        positive(self.asymptotics.beta0, "asymptotics.beta0")
        positive(self.asymptotics.h0, "asymptotics.h0")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    try:
        return ExperimentConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def ensure_output_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out
