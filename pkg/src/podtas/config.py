"""Experiment configuration: one TOML file, fully validated at load time.

Every section is optional; missing keys take the defaults below. Paths are
resolved relative to the config file. An empty ``floorplan`` or ``tasks``
path selects the built-in floorplan or the synthetic task set.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .domain import (SILICON, BoundaryConfig, Floorplan, Grid, Material, default_floorplan,
                     load_floorplan)
from .oracle import DEFAULT_H, ThermalSetup
from .scheduler import SchedulerConfig
from .tasks import load_tasks, synthetic_task_set

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config", "DEFAULT_CONFIG"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    floorplan: str = ""
    tasks: str = ""
    out: str = "runs"


@dataclass(frozen=True)
class GridSection:
    nx: int = 40
    ny: int = 34
    nz: int = 5


@dataclass(frozen=True)
class MaterialSection:
    conductivity: float = SILICON.conductivity
    density: float = SILICON.density
    specific_heat: float = SILICON.specific_heat


@dataclass(frozen=True)
class BoundarySection:
    heat_transfer_coefficient: float = DEFAULT_H
    ambient_temperature: float = 45.0


@dataclass(frozen=True)
class PodSection:
    modes: int = 30
    dt: float = 1e-4
    snapshot_stride: int = 10
    n_traces: int = 4
    horizon: float = 0.5
    max_power: float = 16.0
    min_dwell: float = 2e-3
    max_dwell: float = 30e-3
    blocks: tuple[str, ...] = ("cores", "northbridge")
    task_traces: bool = True
    centered: bool = False


@dataclass(frozen=True)
class TaskSection:
    n_tasks: int = 4
    period_ms: int = 250
    power_scale: float = 1.0


@dataclass(frozen=True)
class SchedulerSection:
    t_cool: float = 70.0
    t_hot: float = 75.0
    quantum: float = 1e-3
    dt: float = 1e-4
    t_end: float = 2.0
    idle_power: float = 0.0
    refine: bool = True


@dataclass(frozen=True)
class EvaluationSection:
    dt: float = 1e-5
    warmup: float = 0.0


@dataclass(frozen=True)
class SweepSection:
    modes: tuple[int, ...] = (3, 10, 30)
    test_horizon: float = 5.0
    t_cool: tuple[float, ...] = (50.0, 55.0, 60.0, 65.0, 70.0, 75.0, 80.0)
    t_hot: tuple[float, ...] = (55.0, 60.0, 65.0, 70.0, 75.0, 80.0, 85.0)


SECTIONS = {
    "paths": Paths, "grid": GridSection, "material": MaterialSection,
    "boundary": BoundarySection, "pod": PodSection, "tasks": TaskSection,
    "scheduler": SchedulerSection, "evaluation": EvaluationSection, "sweep": SweepSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    paths: Paths = field(default_factory=Paths)
    grid: GridSection = field(default_factory=GridSection)
    material: MaterialSection = field(default_factory=MaterialSection)
    boundary: BoundarySection = field(default_factory=BoundarySection)
    pod: PodSection = field(default_factory=PodSection)
    tasks: TaskSection = field(default_factory=TaskSection)
    scheduler: SchedulerSection = field(default_factory=SchedulerSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    seed: int = 0
    base_dir: str = field(default=".", compare=False)

    # -- derived objects ---------------------------------------------------

    def _path(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def floorplan(self) -> Floorplan:
        return load_floorplan(self._path(self.paths.floorplan)) if self.paths.floorplan \
            else default_floorplan()

    def setup(self) -> ThermalSetup:
        fp = self.floorplan()
        grid = Grid.for_floorplan(fp, self.grid.nx, self.grid.ny, self.grid.nz)
        m = Material(self.material.conductivity, self.material.density, self.material.specific_heat)
        bc = BoundaryConfig(self.boundary.heat_transfer_coefficient,
                            self.boundary.ambient_temperature)
        return ThermalSetup(fp, grid, m, bc)

    def task_set(self):
        if self.paths.tasks:
            return load_tasks(self._path(self.paths.tasks))
        return synthetic_task_set(self.tasks.n_tasks, self.seed, self.tasks.period_ms,
                                  self.tasks.power_scale)

    def scheduler_config(self) -> SchedulerConfig:
        s = self.scheduler
        return SchedulerConfig(s.t_cool, s.t_hot, s.quantum, s.dt, s.t_end, s.idle_power)

    def out_dir(self) -> Path:
        return self._path(self.paths.out)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def to_toml(self) -> str:
        lines = [f"seed = {self.seed}"]
        for name in SECTIONS:
            lines.append(f"\n[{name}]")
            for k, v in asdict(getattr(self, name)).items():
                lines.append(f"{k} = {_toml_value(v)}")
        return "\n".join(lines) + "\n"

    def digest(self, *sections: str) -> str:
        """Short hash of the resolved config (or of the named sections only)."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def model_key(self) -> str:
        """Hash of everything that determines the trained reduced model."""
        return _model_digest(self)

    def coupling_key(self) -> str:
        """Hash of everything that determines the steady-state coupling matrix."""
        d = self.to_dict()
        keep = {k: d[k] for k in ("grid", "material", "boundary")}
        keep["floorplan"] = d["paths"]["floorplan"]
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:12]

    def validate(self) -> "ExperimentConfig":
        """Check every numeric constraint and referenced path; returns ``self``."""
        try:
            g, p, t = self.grid, self.pod, self.tasks
            if min(g.nx, g.ny, g.nz) < 2:
                raise ValueError("grid counts must be >= 2")
            if p.modes < 1 or p.snapshot_stride < 1 or p.n_traces < 0:
                raise ValueError("pod.modes, pod.snapshot_stride must be >= 1, n_traces >= 0")
            for name in ("dt", "horizon", "max_power", "min_dwell"):
                if not getattr(p, name) > 0:
                    raise ValueError(f"pod.{name} must be positive")
            if p.max_dwell < p.min_dwell:
                raise ValueError("pod.max_dwell must be >= pod.min_dwell")
            if p.n_traces == 0 and not p.task_traces:
                raise ValueError("no POD training traces configured")
            if t.n_tasks < 1 or t.period_ms <= 0 or t.power_scale < 0:
                raise ValueError("invalid [tasks] section")
            if not self.evaluation.dt > 0 or self.evaluation.warmup < 0:
                raise ValueError("invalid [evaluation] section")
            sc = self.scheduler_config()
            spq = sc.quantum / self.evaluation.dt
            if abs(spq - round(spq)) > 1e-9 * spq:
                raise ValueError("evaluation.dt must divide scheduler.quantum")
            if not self.sweep.modes or min(self.sweep.modes) < 1 or self.sweep.test_horizon <= 0:
                raise ValueError("invalid [sweep] section")
            for path in (self.paths.floorplan, self.paths.tasks):
                if path and not self._path(path).is_file():
                    raise ValueError(f"file not found: {self._path(path)}")
            setup = self.setup()
            for b in p.blocks:
                if b != "cores" and b not in setup.floorplan.block_names:
                    raise ValueError(f"pod.blocks: unknown block {b!r}")
            self.task_set()
            Material(self.material.conductivity, self.material.density, self.material.specific_heat)
            BoundaryConfig(self.boundary.heat_transfer_coefficient,
                           self.boundary.ambient_temperature)
        except (ValueError, KeyError, OSError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Override ``section.key`` values, e.g. ``{"scheduler.t_cool": 65}``."""
        cfg = self
        for dotted, value in kw.items():
            if value is None:
                continue
            if dotted == "seed":
                cfg = replace(cfg, seed=int(value))
                continue
            sec, key = dotted.split(".")
            cfg = replace(cfg, **{sec: replace(getattr(cfg, sec), **{key: value})})
        return cfg


def _model_digest(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    paths = dict(d["paths"])
    paths.pop("out")
    keep = {k: d[k] for k in ("grid", "material", "boundary", "pod", "tasks", "seed")}
    keep["paths"] = paths
    blob = json.dumps(keep, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(cls, name, raw: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"[{name}]: unknown keys {sorted(unknown)}")
    kw = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        try:
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise TypeError
            elif isinstance(default, tuple):
                elem = type(default[0]) if default else str
                value = tuple(elem(x) for x in value)
            elif isinstance(default, (int, float)) and not isinstance(value, bool):
                value = type(default)(value)
                if isinstance(default, int) and value != raw[key]:
                    raise TypeError
            elif isinstance(default, str) and not isinstance(value, str):
                raise TypeError
        except (TypeError, ValueError):
            raise ConfigError(f"[{name}] {key}: bad value {raw[key]!r}") from None
        kw[key] = value
    return cls(**kw)


def parse_config(text: str, base_dir=".") -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    kw = {"base_dir": str(base_dir)}
    if "seed" in raw:
        seed = raw.pop("seed")
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        kw["seed"] = seed
    for name, value in raw.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        if not isinstance(value, dict):
            raise ConfigError(f"[{name}] must be a table")
        kw[name] = _coerce(SECTIONS[name], name, value)
    try:
        cfg = ExperimentConfig(**kw)
        cfg.scheduler_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)


DEFAULT_CONFIG = ExperimentConfig().to_toml()
