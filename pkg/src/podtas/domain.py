"""Physical and scheduling domain types shared across the package.

Geometry is in meters, temperatures in degrees Celsius, power in watts.
Fields on a :class:`Grid` are stored as arrays of shape ``(nz, ny, nx)``;
``z = 0`` is the substrate bottom (the convective face) and the active
layer is where block power is dissipated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "FloorplanError",
    "Material",
    "BoundaryConfig",
    "Grid",
    "Block",
    "Floorplan",
    "ThermalField",
    "PowerField",
    "BlockPowerTrace",
    "Task",
    "Schedule",
    "load_floorplan",
    "parse_floorplan",
    "default_floorplan",
    "rasterize_power",
    "block_average",
    "block_peak",
]

MM = 1e-3


class FloorplanError(ValueError):
    """Malformed floorplan file or invalid block geometry."""


def _frozen(arr, dtype=float):
    out = np.array(arr, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Material:
    conductivity: float  # W/(m K)
    density: float  # kg/m^3
    specific_heat: float  # J/(kg K)

    def __post_init__(self):
        for name in ("conductivity", "density", "specific_heat"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive, got {value}")

    @property
    def volumetric_heat_capacity(self) -> float:
        return self.density * self.specific_heat


SILICON = Material(conductivity=150.0, density=2330.0, specific_heat=700.0)


@dataclass(frozen=True)
class BoundaryConfig:
    """Convective substrate bottom; every other face is adiabatic."""

    heat_transfer_coefficient: float  # W/(m^2 K)
    ambient_temperature: float = 45.0  # degC

    def __post_init__(self):
        if not self.heat_transfer_coefficient > 0:
            raise ValueError("heat_transfer_coefficient must be positive")
        if not math.isfinite(self.ambient_temperature):
            raise ValueError("ambient_temperature must be finite")


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float
    layers: tuple[str, ...] = ()

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 2:
            raise ValueError("grid needs at least 2 cells per direction")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ValueError("cell sizes must be positive")
        layers = tuple(self.layers) or ("substrate",) * (self.nz - 1) + ("active",)
        object.__setattr__(self, "layers", layers)
        if len(layers) != self.nz:
            raise ValueError(f"expected {self.nz} layer tags, got {len(layers)}")
        if set(layers) - {"active", "substrate"}:
            raise ValueError(f"unknown layer tags {set(layers) - {'active', 'substrate'}}")
        if layers.count("active") != 1:
            raise ValueError("exactly one active layer is required")

    @classmethod
    def for_floorplan(cls, floorplan: Floorplan, nx=40, ny=34, nz=5, layers=()) -> Grid:
        return cls(nx, ny, nz, floorplan.width / nx, floorplan.height / ny,
                   floorplan.thickness / nz, tuple(layers))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nz, self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.dz

    @property
    def active_layer(self) -> int:
        return self.layers.index("active")

    def x_centers(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx

    def y_centers(self) -> np.ndarray:
        return (np.arange(self.ny) + 0.5) * self.dy


@dataclass(frozen=True)
class Block:
    name: str
    x: float
    y: float
    width: float
    height: float

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + 0.5 * self.width, self.y + 0.5 * self.height)


@dataclass(frozen=True)
class Floorplan:
    """Rectangular functional blocks on a ``width x height x thickness`` die.

    ``cores`` lists the names of the blocks that execute tasks, in core-index
    order.
    """

    width: float
    height: float
    thickness: float
    blocks: tuple[Block, ...]
    cores: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "cores", tuple(self.cores))
        if min(self.width, self.height, self.thickness) <= 0:
            raise FloorplanError("chip dimensions must be positive")
        names = [b.name for b in self.blocks]
        if not names:
            raise FloorplanError("floorplan has no blocks")
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise FloorplanError(f"duplicate block names: {dupes}")
        tol = 1e-9 * max(self.width, self.height)
        for b in self.blocks:
            if b.width <= 0 or b.height <= 0:
                raise FloorplanError(f"block {b.name!r} has non-positive size")
            if (b.x < -tol or b.y < -tol or b.x + b.width > self.width + tol
                    or b.y + b.height > self.height + tol):
                raise FloorplanError(f"block {b.name!r} lies outside the chip footprint")
        for i, a in enumerate(self.blocks):
            for b in self.blocks[i + 1:]:
                ox = min(a.x + a.width, b.x + b.width) - max(a.x, b.x)
                oy = min(a.y + a.height, b.y + b.height) - max(a.y, b.y)
                if ox > tol and oy > tol:
                    raise FloorplanError(f"blocks {a.name!r} and {b.name!r} overlap")
        unknown = [c for c in self.cores if c not in names]
        if unknown:
            raise FloorplanError(f"core(s) {unknown} are not blocks")

    @property
    def block_names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.blocks)

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(f"unknown block {name!r}")

    def index(self, name: str) -> int:
        try:
            return self.block_names.index(name)
        except ValueError:
            raise KeyError(f"unknown block {name!r}") from None

    @property
    def core_indices(self) -> tuple[int, ...]:
        return tuple(self.index(c) for c in self.cores)

    def power_vector(self, block_powers: Mapping[str, float]) -> np.ndarray:
        """Dense per-block power vector in floorplan block order."""
        vec = np.zeros(len(self.blocks))
        for name, value in block_powers.items():
            value = float(value)
            if value < 0 or not math.isfinite(value):
                raise ValueError(f"power for {name!r} must be finite and >= 0, got {value}")
            vec[self.index(name)] += value
        return vec


def parse_floorplan(text: str) -> Floorplan:
    """Parse the text floorplan format.

    ::

        chip <width_mm> <height_mm> <thickness_mm>
        <name> <x_mm> <y_mm> <width_mm> <height_mm> [core]

    ``#`` starts a comment.
    """
    chip = None
    blocks, cores = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "chip":
                if chip is not None or len(parts) != 4:
                    raise FloorplanError("expected a single 'chip width height thickness' line")
                chip = tuple(float(p) * MM for p in parts[1:])
                continue
            if len(parts) not in (5, 6) or (len(parts) == 6 and parts[5] != "core"):
                raise FloorplanError("expected 'name x y width height [core]'")
            x, y, w, h = (float(p) * MM for p in parts[1:5])
        except (ValueError, IndexError) as exc:
            raise FloorplanError(f"line {lineno}: {exc}") from None
        blocks.append(Block(parts[0], x, y, w, h))
        if len(parts) == 6:
            cores.append(parts[0])
    if chip is None:
        raise FloorplanError("missing 'chip' header line")
    return Floorplan(*chip, blocks=tuple(blocks), cores=tuple(cores))


def load_floorplan(path) -> Floorplan:
    return parse_floorplan(Path(path).read_text(encoding="utf-8"))


def default_floorplan() -> Floorplan:
    """Quad-core 14 mm x 12 mm x 0.3 mm die laid out after the Athlon II X4."""
    text = resources.files("podtas.data").joinpath("athlon_x4.flp").read_text(encoding="utf-8")
    return parse_floorplan(text)


@dataclass(frozen=True)
class ThermalField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != self.grid.shape:
            raise ValueError(f"field shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("temperature field has non-finite values")
        object.__setattr__(self, "values", values)

    @classmethod
    def uniform(cls, grid: Grid, value: float) -> ThermalField:
        return cls(grid, np.full(grid.shape, float(value)))

    @property
    def active(self) -> np.ndarray:
        return self.values[self.grid.active_layer]


@dataclass(frozen=True)
class PowerField:
    """Volumetric power density (W/m^3), nonzero only in the active layer."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != self.grid.shape:
            raise ValueError(f"field shape {values.shape} does not match grid {self.grid.shape}")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("power density must be finite and non-negative")
        mask = np.ones(self.grid.nz, bool)
        mask[self.grid.active_layer] = False
        if np.any(values[mask] != 0):
            raise ValueError("power density must vanish outside the active layer")
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: Grid) -> PowerField:
        return cls(grid, np.zeros(grid.shape))

    def total(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)


def _interval_overlap(lo, hi, edges_lo, edges_hi):
    return np.clip(np.minimum(hi, edges_hi) - np.maximum(lo, edges_lo), 0.0, None)


def footprint_weights(block: Block, grid: Grid) -> np.ndarray:
    """Overlap area (m^2) between ``block`` and every ``(y, x)`` cell."""
    xe = np.arange(grid.nx + 1) * grid.dx
    ye = np.arange(grid.ny + 1) * grid.dy
    ox = _interval_overlap(block.x, block.x + block.width, xe[:-1], xe[1:])
    oy = _interval_overlap(block.y, block.y + block.height, ye[:-1], ye[1:])
    return np.outer(oy, ox)


def power_map(floorplan: Floorplan, grid: Grid) -> np.ndarray:
    """Active-layer density per watt: shape ``(n_blocks, ny, nx)`` in W/m^3 per W."""
    out = np.empty((len(floorplan.blocks), grid.ny, grid.nx))
    for k, b in enumerate(floorplan.blocks):
        out[k] = footprint_weights(b, grid) / (b.area * grid.dz * grid.dx * grid.dy)
    return out


def rasterize_power(floorplan: Floorplan, block_powers, grid: Grid) -> PowerField:
    """Spread each block's wattage uniformly over its footprint in the active layer.

    Cells partially covered by a block receive power in proportion to the
    covered area, so the map is exactly linear in ``block_powers`` and the
    integrated density equals the total input power.

    ``block_powers`` is a ``{name: W}`` mapping or a vector in floorplan
    block order.
    """
    if isinstance(block_powers, Mapping):
        vec = floorplan.power_vector(block_powers)
    else:
        vec = np.asarray(block_powers, dtype=float)
        if vec.shape != (len(floorplan.blocks),):
            raise ValueError("power vector length does not match the block count")
        if np.any(vec < 0):
            raise ValueError("block powers must be non-negative")
    values = np.zeros(grid.shape)
    values[grid.active_layer] = np.tensordot(vec, power_map(floorplan, grid), axes=1)
    return PowerField(grid, values)


def _footprint(field: ThermalField, floorplan: Floorplan, block: str):
    w = footprint_weights(floorplan.block(block), field.grid)
    return field.active, w


def block_average(field: ThermalField, floorplan: Floorplan, block: str) -> float:
    """Area-weighted mean active-layer temperature under a block."""
    layer, w = _footprint(field, floorplan, block)
    return float((layer * w).sum() / w.sum())


def block_peak(field: ThermalField, floorplan: Floorplan, block: str) -> float:
    """Hottest active-layer cell touched by a block's footprint."""
    layer, w = _footprint(field, floorplan, block)
    return float(layer[w > 1e-9 * field.grid.dx * field.grid.dy].max())


@dataclass(frozen=True)
class BlockPowerTrace:
    """Piecewise-constant (zero-order hold) per-block power over time.

    Row ``k`` of ``powers`` holds from ``times[k]`` until ``times[k + 1]``;
    the last row holds forever.
    """

    times: np.ndarray
    powers: np.ndarray
    blocks: tuple[str, ...]

    def __post_init__(self):
        times = _frozen(self.times)
        powers = _frozen(self.powers)
        if powers.ndim != 2 or powers.shape != (times.size, len(self.blocks)):
            raise ValueError("powers must have shape (len(times), len(blocks))")
        if times.size == 0 or times[0] != 0 or np.any(np.diff(times) <= 0):
            raise ValueError("trace times must start at 0 and increase strictly")
        if np.any(powers < 0):
            raise ValueError("powers must be non-negative")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "powers", powers)
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @classmethod
    def constant(cls, floorplan: Floorplan, block_powers) -> BlockPowerTrace:
        if isinstance(block_powers, Mapping):
            vec = floorplan.power_vector(block_powers)
        else:
            vec = np.asarray(block_powers, float)
        return cls(np.zeros(1), vec[None, :], floorplan.block_names)

    def at(self, t: float) -> np.ndarray:
        k = int(np.searchsorted(self.times, t * (1 + 1e-12) + 1e-15, side="right")) - 1
        return self.powers[max(k, 0)]

    def sample(self, dt: float, n: int) -> np.ndarray:
        """Power rows held at ``t = 0, dt, ..., (n-1) dt``."""
        t = np.arange(n) * dt
        k = np.searchsorted(self.times, t * (1 + 1e-12) + 1e-15, side="right") - 1
        return self.powers[np.maximum(k, 0)]


@dataclass(frozen=True)
class Task:
    """A periodic task with a synthetic power trace.

    ``trace_columns`` name where each trace column's power goes: the special
    column ``"core"`` lands on whichever core executes the task; any other
    column is a fixed floorplan block (shared blocks sum across cores).
    """

    name: str
    wcet: float
    deadline: float
    period: float
    trace_times: np.ndarray
    trace_powers: np.ndarray
    trace_columns: tuple[str, ...] = ("core",)

    def __post_init__(self):
        if not 0 < self.wcet <= self.deadline <= self.period:
            raise ValueError(f"task {self.name!r}: need 0 < wcet <= deadline <= period")
        times = _frozen(self.trace_times)
        powers = _frozen(self.trace_powers)
        if powers.ndim == 1:
            powers = _frozen(powers[:, None])
        object.__setattr__(self, "trace_times", times)
        object.__setattr__(self, "trace_powers", powers)
        object.__setattr__(self, "trace_columns", tuple(self.trace_columns))
        if powers.shape != (times.size, len(self.trace_columns)):
            raise ValueError(f"task {self.name!r}: trace shape mismatch")
        if times.size == 0 or times[0] != 0 or np.any(np.diff(times) <= 0):
            raise ValueError(f"task {self.name!r}: trace offsets must start at 0 and increase")
        if times[-1] > self.wcet * (1 + 1e-12):
            raise ValueError(f"task {self.name!r}: trace extends past the WCET")
        if np.any(powers < 0):
            raise ValueError(f"task {self.name!r}: negative power sample")

    @property
    def utilization(self) -> float:
        return self.wcet / self.period

    def power_at(self, offset: float) -> np.ndarray:
        k = int(np.searchsorted(self.trace_times, offset * (1 + 1e-12) + 1e-15, side="right")) - 1
        return self.trace_powers[max(k, 0)]

    def sampled(self, dt: float, n: int) -> np.ndarray:
        """Trace rows held at execution offsets ``0, dt, ..., (n-1) dt``."""
        t = np.arange(n) * dt
        k = np.searchsorted(self.trace_times, t * (1 + 1e-12) + 1e-15, side="right") - 1
        return self.trace_powers[np.maximum(k, 0)]

    def mean_power(self) -> np.ndarray:
        """Time-averaged power of each trace column over ``[0, wcet]``."""
        edges = np.append(self.trace_times, self.wcet)
        return (np.diff(edges)[:, None] * self.trace_powers).sum(axis=0) / self.wcet

    def block_power(self, floorplan: Floorplan, core: str, row: np.ndarray) -> np.ndarray:
        vec = np.zeros(len(floorplan.blocks))
        for col, value in zip(self.trace_columns, row):
            vec[floorplan.index(core if col == "core" else col)] += value
        return vec


@dataclass(frozen=True)
class Schedule:
    """Time-stamped core assignments.

    Each entry is ``(tick, assignment)``: from ``tick * quantum`` until the
    next entry, ``assignment[i]`` is the task bound to ``cores[i]`` (or
    ``None`` for idle).
    """

    quantum: float
    t_end: float
    cores: tuple[str, ...]
    entries: tuple[tuple[int, tuple], ...]
    algorithm: str = ""
    t_cool: float | None = None
    t_hot: float | None = None
    valid: bool = True
    misses: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "cores", tuple(self.cores))
        entries = tuple((int(t), tuple(a)) for t, a in self.entries)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "misses", tuple((str(n), float(t)) for n, t in self.misses))
        if self.quantum <= 0 or self.t_end <= 0:
            raise ValueError("quantum and t_end must be positive")
        ticks = [t for t, _ in entries]
        if any(b <= a for a, b in zip(ticks, ticks[1:])) or (ticks and ticks[0] < 0):
            raise ValueError("decision ticks must be non-negative and strictly increasing")
        for tick, assignment in entries:
            if len(assignment) != len(self.cores):
                raise ValueError(f"assignment at tick {tick} does not cover every core")
            busy = [a for a in assignment if a is not None]
            if len(busy) != len(set(busy)):
                raise ValueError(f"a task occupies more than one core at tick {tick}")

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.entries], dtype=float) * self.quantum

    @property
    def n_ticks(self) -> int:
        return int(round(self.t_end / self.quantum))

    def assignment_map(self, i: int) -> dict[str, str | None]:
        return dict(zip(self.cores, self.entries[i][1]))

    def task_names(self) -> set[str]:
        return {a for _, assignment in self.entries for a in assignment if a is not None}

    def assignment_frequency(self) -> float:
        """Appended decisions per second of schedule horizon."""
        return len(self.entries) / self.t_end
