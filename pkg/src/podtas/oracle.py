"""Finite-volume solver for the 3D transient heat equation on a box die.

The discrete system, written for the temperature rise ``theta = T - T_amb``,
is ::

    cap * dtheta/dt + (K + H) theta = q

with ``cap`` the per-cell heat capacity (J/K), ``K`` the seven-point
conductance Laplacian built from harmonic-mean face conductances, ``H`` the
diagonal convective exchange ``h * dx * dy`` of bottom-layer cells and ``q``
the per-cell power (W). Time stepping is backward Euler.

Because the grid spacing and the conductivity are uniform, ``K + H`` is
diagonalized exactly by a DCT-II in ``x`` and ``y`` (adiabatic side faces)
and a small dense eigenbasis in ``z``. That separable transform is the
default solver; a sparse LU factorization is kept as an independent route.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import (
    SILICON,
    BlockPowerTrace,
    BoundaryConfig,
    Floorplan,
    Grid,
    Material,
    PowerField,
    ThermalField,
    default_floorplan,
    power_map,
)

log = logging.getLogger(__name__)

__all__ = [
    "ConvergenceError",
    "ThermalSetup",
    "HeatOperator",
    "DnsSolver",
    "SnapshotSet",
    "default_setup",
    "solve_steady",
    "run_transient",
    "save_snapshots",
    "load_snapshots",
]

STEADY_RTOL = 1e-8
DEFAULT_H = 8000.0


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class ThermalSetup:
    """Everything the oracle needs: geometry, mesh, material and boundary."""

    floorplan: Floorplan
    grid: Grid
    material: Material = SILICON
    bc: BoundaryConfig = BoundaryConfig(DEFAULT_H, 45.0)

    @cached_property
    def operator(self) -> HeatOperator:
        return HeatOperator(self.grid, self.material, self.bc)

    @cached_property
    def cell_power_map(self) -> np.ndarray:
        """Per-cell watts per block watt, shape ``(n_blocks, nz, ny, nx)``."""
        g = self.grid
        out = np.zeros((len(self.floorplan.blocks),) + g.shape)
        out[:, g.active_layer] = power_map(self.floorplan, g) * g.cell_volume
        return out

    def cell_power(self, block_powers: np.ndarray) -> np.ndarray:
        return np.tensordot(block_powers, self.cell_power_map, axes=1)


def default_setup(nx=40, ny=34, nz=5, h=DEFAULT_H, ambient=45.0) -> ThermalSetup:
    fp = default_floorplan()
    return ThermalSetup(fp, Grid.for_floorplan(fp, nx, ny, nz), SILICON, BoundaryConfig(h, ambient))


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


class HeatOperator:
    """Discrete capacity, conductance and boundary terms on a grid."""

    def __init__(self, grid: Grid, material: Material, bc: BoundaryConfig):
        self.grid, self.material, self.bc = grid, material, bc
        g = grid
        self.capacity = material.volumetric_heat_capacity * g.cell_volume
        k = np.full(g.shape, material.conductivity)
        # face conductances (W/K) between neighbouring cells along each axis
        self.gx = _harmonic(k[:, :, 1:], k[:, :, :-1]) * g.dy * g.dz / g.dx
        self.gy = _harmonic(k[:, 1:, :], k[:, :-1, :]) * g.dx * g.dz / g.dy
        self.gz = _harmonic(k[1:], k[:-1]) * g.dx * g.dy / g.dz
        self.boundary = np.zeros(g.shape)
        self.boundary[0] = bc.heat_transfer_coefficient * g.dx * g.dy

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """Interior conductance Laplacian ``K`` (no boundary exchange)."""
        g = self.grid
        idx = np.arange(g.size).reshape(g.shape)
        rows, cols, vals = [], [], []
        for cond, a, b in (
            (self.gx, idx[:, :, :-1], idx[:, :, 1:]),
            (self.gy, idx[:, :-1, :], idx[:, 1:, :]),
            (self.gz, idx[:-1], idx[1:]),
        ):
            a, b, c = a.ravel(), b.ravel(), cond.ravel()
            rows += [a, b, a, b]
            cols += [b, a, a, b]
            vals += [-c, -c, c, c]
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(g.size, g.size),
        )

    @cached_property
    def system(self) -> sp.csr_matrix:
        """``K + H``: conductance plus convective boundary exchange."""
        return (self.stiffness + sp.diags(self.boundary.ravel())).tocsr()

    def apply(self, theta: np.ndarray) -> np.ndarray:
        return (self.system @ theta.ravel()).reshape(self.grid.shape)

    def is_separable(self) -> bool:
        return all(np.ptp(c) == 0 for c in (self.gx, self.gy, self.gz))

    @cached_property
    def spectrum(self):
        """Eigenvalues of ``K + H`` (W/K) and the z-eigenbasis."""
        if not self.is_separable():
            raise ValueError("separable solver needs uniform face conductances")
        g = self.grid
        gx, gy, gz = self.gx.flat[0], self.gy.flat[0], self.gz.flat[0]
        mu_x = 2.0 - 2.0 * np.cos(np.pi * np.arange(g.nx) / g.nx)
        mu_y = 2.0 - 2.0 * np.cos(np.pi * np.arange(g.ny) / g.ny)
        lz = np.diag(np.r_[1.0, 2.0 * np.ones(g.nz - 2), 1.0])
        lz -= np.diag(np.ones(g.nz - 1), 1) + np.diag(np.ones(g.nz - 1), -1)
        az = gz * lz
        az[0, 0] += self.boundary[0, 0, 0]
        nu, q = np.linalg.eigh(az)
        lam = nu[:, None, None] + gy * mu_y[None, :, None] + gx * mu_x[None, None, :]
        return lam, q

    def forward(self, arr: np.ndarray) -> np.ndarray:
        _, q = self.spectrum
        hat = sfft.dctn(arr, type=2, axes=(1, 2), norm="ortho")
        return np.tensordot(q.T, hat, axes=1)

    def inverse(self, hat: np.ndarray) -> np.ndarray:
        _, q = self.spectrum
        return sfft.idctn(np.tensordot(q, hat, axes=1), type=2, axes=(1, 2), norm="ortho")

    def layer_inverse(self, hat: np.ndarray, z: int) -> np.ndarray:
        _, q = self.spectrum
        return sfft.idctn(np.tensordot(q[z], hat, axes=1), type=2, norm="ortho")


def _check_residual(op: HeatOperator, theta, rhs, shift, what):
    lhs = op.apply(theta) + shift * theta
    denom = np.linalg.norm(rhs)
    res = np.linalg.norm(lhs - rhs) / denom if denom > 0 else np.linalg.norm(lhs)
    if not res <= STEADY_RTOL:
        raise ConvergenceError(f"{what} did not converge", res)
    return res


class DnsSolver:
    """Backward-Euler time stepper holding the current temperature field.

    Parameters
    ----------
    setup : ThermalSetup
    dt : float
        Default step size (s); ``step`` may override it per call.
    initial : ThermalField, optional
        Restart field; uniform ambient otherwise.
    method : {"spectral", "lu"}
        Separable transform solve or sparse LU factorization.
    """

    def __init__(self, setup: ThermalSetup, dt: float, initial: ThermalField | None = None,
                 method: str = "spectral", check_residual: bool = False):
        if not dt > 0:
            raise ValueError("dt must be positive")
        if method not in ("spectral", "lu"):
            raise ValueError(f"unknown method {method!r}")
        self.setup, self.dt, self.method = setup, float(dt), method
        self.grid, self.material, self.bc = setup.grid, setup.material, setup.bc
        self.op = setup.operator
        self.check_residual = check_residual
        self.time = 0.0
        self._lu = {}
        theta = np.zeros(self.grid.shape)
        if initial is not None:
            if initial.grid != self.grid:
                raise ValueError("initial field is on a different grid")
            theta = initial.values - self.bc.ambient_temperature
        self._set_theta(theta)

    def _set_theta(self, theta):
        if self.method == "spectral":
            self._hat = self.op.forward(theta)
        else:
            self._theta = np.array(theta, dtype=float)

    @cached_property
    def _block_hat(self):
        return np.stack([self.op.forward(m) for m in self.setup.cell_power_map])

    def _factor(self, dt):
        if dt not in self._lu:
            a = self.op.system + sp.identity(self.grid.size) * (self.op.capacity / dt)
            self._lu[dt] = spla.splu(a.tocsc())
        return self._lu[dt]

    def step(self, power, dt: float | None = None) -> None:
        """Advance one implicit step under a :class:`PowerField` or block-power vector."""
        dt = self.dt if dt is None else float(dt)
        if not dt > 0:
            raise ValueError("dt must be positive")
        shift = self.op.capacity / dt
        if isinstance(power, PowerField):
            if power.grid != self.grid:
                raise ValueError("power field is on a different grid")
            q = power.values * self.grid.cell_volume
            q_hat = None
        else:
            vec = np.asarray(power, dtype=float)
            q = None
            q_hat = np.tensordot(vec, self._block_hat, axes=1) if self.method == "spectral" else None
            if self.method == "lu" or self.check_residual:
                q = self.setup.cell_power(vec)
        if self.method == "spectral":
            if q_hat is None:
                q_hat = self.op.forward(q)
            lam, _ = self.op.spectrum
            prev = self._hat
            self._hat = (shift * prev + q_hat) / (shift + lam)
            if self.check_residual:
                _check_residual(self.op, self.op.inverse(self._hat),
                                shift * self.op.inverse(prev) + q, shift, "implicit step")
        else:
            rhs = shift * self._theta + q
            theta = self._factor(dt).solve(rhs.ravel()).reshape(self.grid.shape)
            if self.check_residual:
                _check_residual(self.op, theta, rhs, shift, "implicit step")
            self._theta = theta
        self.time += dt

    @property
    def rise(self) -> np.ndarray:
        if self.method == "spectral":
            return self.op.inverse(self._hat)
        return self._theta.copy()

    @property
    def field(self) -> ThermalField:
        return ThermalField(self.grid, self.rise + self.bc.ambient_temperature)

    def active_temperature(self) -> np.ndarray:
        """Active-layer temperatures only; cheaper than ``field`` on the spectral path."""
        z = self.grid.active_layer
        if self.method == "spectral":
            return self.op.layer_inverse(self._hat, z) + self.bc.ambient_temperature
        return self._theta[z] + self.bc.ambient_temperature


def step(solver: DnsSolver, power, dt: float | None = None) -> ThermalField:
    solver.step(power, dt)
    return solver.field


def solve_steady(grid: Grid, material: Material, bc: BoundaryConfig, power: PowerField,
                 method: str = "spectral") -> ThermalField:
    """Stationary field for a fixed power density (same boundary conditions)."""
    if power.grid != grid:
        raise ValueError("power field is on a different grid")
    op = HeatOperator(grid, material, bc)
    q = power.values * grid.cell_volume
    if method == "spectral":
        lam, _ = op.spectrum
        theta = op.inverse(op.forward(q) / lam)
    elif method == "lu":
        theta = spla.splu(op.system.tocsc()).solve(q.ravel()).reshape(grid.shape)
    else:
        raise ValueError(f"unknown method {method!r}")
    _check_residual(op, theta, q, 0.0, "steady solve")
    return ThermalField(grid, theta + bc.ambient_temperature)


@dataclass(frozen=True)
class SnapshotSet:
    """Oracle fields recorded at increasing times, plus their provenance."""

    grid: Grid
    times: np.ndarray
    fields: np.ndarray  # (n_snapshots, nz, ny, nx)
    material: Material = SILICON
    bc: BoundaryConfig = BoundaryConfig(DEFAULT_H, 45.0)
    dt: float = 0.0
    trace: BlockPowerTrace | None = None

    def __post_init__(self):
        times = np.array(self.times, float)
        fields = np.array(self.fields, float)
        if fields.shape != (times.size,) + self.grid.shape:
            raise ValueError("snapshot array shape does not match times/grid")
        if np.any(np.diff(times) <= 0):
            raise ValueError("snapshot times must increase strictly")
        times.setflags(write=False)
        fields.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "fields", fields)

    def __len__(self):
        return self.times.size

    def __getitem__(self, k) -> ThermalField:
        return ThermalField(self.grid, self.fields[k])

    def matrix(self) -> np.ndarray:
        """Snapshots as columns, shape ``(n_cells, n_snapshots)``."""
        return self.fields.reshape(len(self), -1).T

    @staticmethod
    def concatenate(sets) -> SnapshotSet:
        """Pool several runs on one grid; times are re-indexed to stay increasing."""
        sets = list(sets)
        grid = sets[0].grid
        if any(s.grid != grid for s in sets):
            raise ValueError("snapshot sets live on different grids")
        fields = np.concatenate([s.fields for s in sets])
        return SnapshotSet(grid, np.arange(fields.shape[0], dtype=float), fields,
                           sets[0].material, sets[0].bc, sets[0].dt, None)


def _n_steps(t_end, dt):
    n = t_end / dt
    if abs(n - round(n)) > 1e-6 * max(1.0, n):
        raise ValueError(f"t_end={t_end} is not a multiple of dt={dt}")
    return int(round(n))


def run_transient(setup: ThermalSetup, power_trace, t_end: float, dt: float,
                  snapshot_stride: int = 1, initial: ThermalField | None = None,
                  method: str = "spectral") -> SnapshotSet:
    """Integrate from ``initial`` (uniform ambient by default) and record snapshots.

    ``power_trace`` is a :class:`BlockPowerTrace` or a callable ``t ->
    PowerField``; either way the power is held constant over each step at its
    value at the step's start time. Snapshots include ``t = 0`` and every
    ``snapshot_stride``-th step after it.
    """
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    if snapshot_stride < 1:
        raise ValueError("snapshot_stride must be >= 1")
    n = _n_steps(t_end, dt)
    solver = DnsSolver(setup, dt, initial=initial, method=method)
    if isinstance(power_trace, BlockPowerTrace):
        if power_trace.blocks != setup.floorplan.block_names:
            raise ValueError("trace blocks do not match the floorplan")
        rows = power_trace.sample(dt, n)
        source = lambda k: rows[k]  # noqa: E731
    else:
        source = lambda k: power_trace(k * dt)  # noqa: E731
    times, fields = [0.0], [solver.field.values]
    for k in range(n):
        solver.step(source(k))
        if (k + 1) % snapshot_stride == 0:
            times.append((k + 1) * dt)
            fields.append(solver.rise + setup.bc.ambient_temperature)
    return SnapshotSet(setup.grid, np.array(times), np.array(fields), setup.material,
                       setup.bc, dt, power_trace if isinstance(power_trace, BlockPowerTrace) else None)


# -- persistence -----------------------------------------------------------

SNAPSHOT_FORMAT = "podtas-snapshots"
SNAPSHOT_VERSION = 1


def _fmt(x: float) -> str:
    return repr(float(x))


def save_snapshots(snapshots: SnapshotSet, directory) -> Path:
    """Write ``meta`` plus one little-endian float64 file per snapshot.

    Field files hold ``nz * ny * nx`` values in z-major, then y, then x order.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    g, m, bc = snapshots.grid, snapshots.material, snapshots.bc
    lines = [
        f"format = {SNAPSHOT_FORMAT}",
        f"version = {SNAPSHOT_VERSION}",
        f"nx = {g.nx}", f"ny = {g.ny}", f"nz = {g.nz}",
        f"dx = {_fmt(g.dx)}", f"dy = {_fmt(g.dy)}", f"dz = {_fmt(g.dz)}",
        f"layers = {','.join(g.layers)}",
        f"conductivity = {_fmt(m.conductivity)}",
        f"density = {_fmt(m.density)}",
        f"specific_heat = {_fmt(m.specific_heat)}",
        f"heat_transfer_coefficient = {_fmt(bc.heat_transfer_coefficient)}",
        f"ambient_temperature = {_fmt(bc.ambient_temperature)}",
        f"dt = {_fmt(snapshots.dt)}",
        f"count = {len(snapshots)}",
        f"times = {','.join(_fmt(t) for t in snapshots.times)}",
    ]
    (d / "meta").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for k in range(len(snapshots)):
        snapshots.fields[k].astype("<f8").tofile(d / f"snapshot_{k:05d}.f64")
    if snapshots.trace is not None:
        tr = snapshots.trace
        rows = [",".join(("time_s",) + tr.blocks)]
        rows += [",".join(_fmt(v) for v in (t, *p)) for t, p in zip(tr.times, tr.powers)]
        (d / "trace.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return d


def load_snapshots(directory) -> SnapshotSet:
    d = Path(directory)
    meta = {}
    for line in (d / "meta").read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    if meta.get("format") != SNAPSHOT_FORMAT or int(meta.get("version", -1)) != SNAPSHOT_VERSION:
        raise ValueError(f"{d} is not a version-{SNAPSHOT_VERSION} snapshot directory")
    grid = Grid(int(meta["nx"]), int(meta["ny"]), int(meta["nz"]), float(meta["dx"]),
                float(meta["dy"]), float(meta["dz"]), tuple(meta["layers"].split(",")))
    material = Material(float(meta["conductivity"]), float(meta["density"]),
                        float(meta["specific_heat"]))
    bc = BoundaryConfig(float(meta["heat_transfer_coefficient"]),
                        float(meta["ambient_temperature"]))
    count = int(meta["count"])
    times = np.array([float(t) for t in meta["times"].split(",")]) if count else np.zeros(0)
    fields = np.stack([
        np.fromfile(d / f"snapshot_{k:05d}.f64", dtype="<f8").reshape(grid.shape)
        for k in range(count)
    ])
    trace = None
    if (d / "trace.csv").exists():
        rows = (d / "trace.csv").read_text(encoding="utf-8").splitlines()
        blocks = tuple(rows[0].split(",")[1:])
        data = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
        trace = BlockPowerTrace(data[:, 0], data[:, 1:], blocks)
    return SnapshotSet(grid, times, fields, material, bc, float(meta["dt"]), trace)
