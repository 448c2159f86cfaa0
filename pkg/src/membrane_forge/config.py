"""Run configuration: one JSON document controlling every module.

Unknown keys anywhere in the document are rejected so typos fail loudly.
All defaults live here; `membrane-forge <cmd> --help` prints them.
The environment variable MEMBRANE_FORGE_SEED overrides the config seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

from .designs import DesignBox
from .ensemble import AcquisitionGrid
from .errors import ConfigError
from .material import MaterialParams
from .sim import SolverConfig
from .surrogate import ModelConfig


@dataclass(frozen=True)
class MaterialSection:
    mu_kpa: float = 31.5
    jm: float = 39.6
    ring_mu_scale: float = 100.0
    ring_jm: float = 1.0

    def params(self, thickness_mm: float) -> MaterialParams:
        return MaterialParams(mu=self.mu_kpa * 1e-3, jm=self.jm,
                              thickness=thickness_mm)


@dataclass(frozen=True)
class SolverSection:
    ode_abs_tol: float = 1e-9
    ode_rel_tol: float = 1e-9
    shoot_tol: float = 1e-8
    f_cap_n: float = 200.0
    report_nodes: int = 450

    def solver_config(self, material: MaterialSection) -> SolverConfig:
        return SolverConfig(
            ode_abs_tol=self.ode_abs_tol, ode_rel_tol=self.ode_rel_tol,
            shoot_tol=self.shoot_tol, f_cap_n=self.f_cap_n,
            report_nodes=self.report_nodes,
            ring_mu_scale=material.ring_mu_scale, ring_jm=material.ring_jm)


@dataclass(frozen=True)
class ModelSection:
    mlp_depth: int = 3
    mlp_width: int = 64
    ring_latent_dim: int = 12
    poly_degree: int = 1
    activation: str = "tanh"

    def model_config(self, seed: int) -> ModelConfig:
        return ModelConfig(mlp_depth=self.mlp_depth, mlp_width=self.mlp_width,
                           ring_latent_dim=self.ring_latent_dim,
                           poly_degree=self.poly_degree,
                           activation=self.activation, seed=seed)


@dataclass(frozen=True)
class TrainingSection:
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 2000
    patience: int = 100


@dataclass(frozen=True)
class EnsembleSection:
    n_members: int = 8
    prior_scale: float = 1.0
    n_starts: int = 64
    q: int = 2
    grid_heights_mm: tuple[float, ...] = (5.0, 20.0, 35.0, 50.0)
    grid_pressures_kpa: tuple[float, ...] = (
        1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0)

    def grid(self) -> AcquisitionGrid:
        return AcquisitionGrid(heights_mm=tuple(self.grid_heights_mm),
                               pressures_kpa=tuple(self.grid_pressures_kpa))


@dataclass(frozen=True)
class DesignSection:
    n_starts: int = 2500
    masses_kg: tuple[float, ...] = (1.5, 2.5, 4.0)
    target_pressures_kpa: tuple[float, ...] = (4.0, 6.0, 8.0)
    k_force: float = 10.0
    k_pressure: float = 10.0
    k_height: float = 0.02
    gamma: float = 0.5


@dataclass(frozen=True)
class BoxSection:
    thickness: tuple[float, float] = (1.0, 3.0)
    contact_radius: tuple[float, float] = (25.4, 38.1)
    ring_center: tuple[float, float] = (32.0, 63.0)
    ring_half_width: tuple[float, float] = (5.0, 8.0)
    ring_counts: tuple[int, ...] = (0, 1, 2)

    def design_box(self) -> DesignBox:
        return DesignBox(thickness=tuple(self.thickness),
                         contact_radius=tuple(self.contact_radius),
                         ring_center=tuple(self.ring_center),
                         ring_half_width=tuple(self.ring_half_width),
                         ring_counts=tuple(self.ring_counts))


@dataclass(frozen=True)
class RunConfig:
    material: MaterialSection = field(default_factory=MaterialSection)
    solver: SolverSection = field(default_factory=SolverSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    design: DesignSection = field(default_factory=DesignSection)
    box: BoxSection = field(default_factory=BoxSection)
    seed: int = 0

    def effective_seed(self) -> int:
        env = os.environ.get("MEMBRANE_FORGE_SEED")
        if env is not None:
            try:
                return int(env)
            except ValueError as exc:
                raise ConfigError(
                    f"MEMBRANE_FORGE_SEED must be an integer, got {env!r}"
                ) from exc
        return self.seed


_SECTIONS = {
    "material": MaterialSection,
    "solver": SolverSection,
    "model": ModelSection,
    "training": TrainingSection,
    "ensemble": EnsembleSection,
    "design": DesignSection,
    "box": BoxSection,
}


def _build_section(cls, obj: dict, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name for f in cls.__dataclass_fields__.values()}
    unknown = set(obj) - fields
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in obj.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_run_config(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(obj) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in obj:
            kwargs[name] = _build_section(cls, obj[name], name)
    if "seed" in obj:
        if not isinstance(obj["seed"], int):
            raise ConfigError(f"seed must be an integer, got {obj['seed']!r}")
        kwargs["seed"] = obj["seed"]
    return RunConfig(**kwargs)


def load_run_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_run_config(obj)


def config_defaults_doc() -> str:
    """Human-readable dump of every config key and its default."""
    lines = []
    cfg = RunConfig()
    doc = asdict(cfg)
    for section, values in doc.items():
        if isinstance(values, dict):
            for k, v in values.items():
                lines.append(f"{section}.{k} = {v}")
        else:
            lines.append(f"{section} = {values}")
    return "\n".join(lines)
