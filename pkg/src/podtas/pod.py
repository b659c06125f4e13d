"""POD modes from oracle snapshots and the Galerkin reduced-order thermal model.

Modes are computed by the method of snapshots under the cell-volume weighted
inner product ``<u, v> = sum(V * u * v)``, so they approximate the continuous
eigenfunctions of the two-point correlation operator. Projecting the oracle's
own discrete heat equation onto ``M`` modes gives ::

    c @ da/dt + g @ a = P(t),   P = B @ p + f_amb

with ``c`` the capacitance, ``g`` the conductance (interior plus convective
boundary), ``B`` the block-power projection and ``f_amb`` the constant
ambient forcing from the bottom-face convection.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping

import numpy as np
import scipy.linalg as sla

from ._container import read_container, write_container
from .domain import BlockPowerTrace, Floorplan, Grid, ThermalField, block_peak, footprint_weights
from .oracle import HeatOperator, SnapshotSet, ThermalSetup

log = logging.getLogger(__name__)

__all__ = [
    "PodBasis",
    "RomOperators",
    "CoefficientTrajectory",
    "ReducedModel",
    "train",
    "assemble_galerkin",
    "project_power",
    "project",
    "integrate",
    "reconstruct",
    "lse",
    "training_traces",
    "save_basis",
    "load_basis",
    "save_operators",
    "load_operators",
]

RANK_TOL = 1e-12
DEFAULT_MODES = 30


@dataclass(frozen=True)
class PodBasis:
    """``M`` orthonormal modes, shape ``(M, nz, ny, nx)``, with descending eigenvalues.

    ``spectrum`` keeps every Gram eigenvalue (clipped at zero), not only the
    retained ones. ``mean`` is the subtracted snapshot mean when ``centered``.
    """

    grid: Grid
    modes: np.ndarray
    eigenvalues: np.ndarray
    weights: np.ndarray
    spectrum: np.ndarray
    centered: bool = False
    mean: np.ndarray | None = None

    @property
    def n_modes(self) -> int:
        return self.modes.shape[0]

    @cached_property
    def matrix(self) -> np.ndarray:
        """Modes as columns, ``(n_cells, M)``."""
        return self.modes.reshape(self.n_modes, -1).T

    def gram(self) -> np.ndarray:
        m = self.matrix
        return m.T @ (self.weights.ravel()[:, None] * m)

    def truncate(self, M: int) -> PodBasis:
        if not 1 <= M <= self.n_modes:
            raise ValueError(f"cannot keep {M} of {self.n_modes} modes")
        return PodBasis(self.grid, self.modes[:M], self.eigenvalues[:M], self.weights,
                        self.spectrum, self.centered, self.mean)


def train(snapshots: SnapshotSet, M: int, centered: bool = False) -> PodBasis:
    """Leading ``M`` POD modes of a snapshot ensemble (method of snapshots).

    Builds the ``Ns x Ns`` Gram matrix of weighted snapshot inner products
    divided by ``Ns``, eigendecomposes it and lifts the eigenvectors back to
    fields. Directions with eigenvalue below ``1e-12`` times the largest are
    dropped with a warning, which may return fewer than ``M`` modes.
    """
    ns = len(snapshots)
    if M < 1:
        raise ValueError("M must be at least 1")
    if M > ns:
        raise ValueError(f"requested {M} modes but only {ns} snapshots are available")
    grid = snapshots.grid
    weights = np.full(grid.shape, grid.cell_volume)
    w = weights.ravel()
    x = snapshots.fields.reshape(ns, -1)
    mean = None
    if centered:
        mean = x.mean(axis=0)
        x = x - mean
    gram = (x * w) @ x.T / ns
    gram = 0.5 * (gram + gram.T)
    lam, vec = np.linalg.eigh(gram)
    order = np.argsort(lam)[::-1]
    lam, vec = lam[order], vec[:, order]
    spectrum = np.clip(lam, 0.0, None)
    if spectrum[0] <= 0:
        raise ValueError("snapshot ensemble has zero energy")
    rank = int(np.sum(lam > RANK_TOL * lam[0]))
    if M > rank:
        warnings.warn(f"snapshot ensemble has numerical rank {rank}; keeping {rank} of {M} modes",
                      RuntimeWarning, stacklevel=2)
        M = rank
    lam, vec = lam[:M], vec[:, :M]
    phi = (vec.T @ x) / np.sqrt(ns * lam)[:, None]
    # one Householder pass restores orthonormality lost to round-off in weak modes
    sw = np.sqrt(w)
    q, r = np.linalg.qr((phi * sw).T)
    q *= np.sign(np.diag(r))
    modes = (q.T / sw).reshape((M,) + grid.shape)
    mean_field = None if mean is None else mean.reshape(grid.shape)
    return PodBasis(grid, modes, lam.copy(), weights, spectrum, centered, mean_field)


def project(basis: PodBasis, field: ThermalField) -> np.ndarray:
    """Weighted projection of a field onto the basis."""
    v = field.values.ravel()
    if basis.centered:
        v = v - basis.mean.ravel()
    return basis.matrix.T @ (basis.weights.ravel() * v)


def reconstruct(basis: PodBasis, a) -> ThermalField:
    a = np.asarray(a, dtype=float)
    if a.shape != (basis.n_modes,):
        raise ValueError(f"expected {basis.n_modes} coefficients, got shape {a.shape}")
    values = np.tensordot(a, basis.modes, axes=1)
    if basis.centered:
        values = values + basis.mean
    return ThermalField(basis.grid, values)


def lse(pred: ThermalField, truth: ThermalField) -> float:
    """Percent least-squared error of ``pred`` against ``truth`` over all cells."""
    if pred.grid != truth.grid:
        raise ValueError("fields live on different grids")
    denom = np.sum(truth.values ** 2)
    if denom == 0:
        raise ValueError("truth field is identically zero")
    return float(100.0 * np.sqrt(np.sum((truth.values - pred.values) ** 2) / denom))


@dataclass(frozen=True)
class RomOperators:
    capacitance: np.ndarray
    conductance_interior: np.ndarray
    conductance_boundary: np.ndarray
    ambient: np.ndarray
    power_projection: np.ndarray
    blocks: tuple[str, ...]

    @property
    def conductance(self) -> np.ndarray:
        return self.conductance_interior + self.conductance_boundary

    @property
    def n_modes(self) -> int:
        return self.capacitance.shape[0]

    def equilibrium(self, block_powers) -> np.ndarray:
        return np.linalg.solve(self.conductance, project_power(self, block_powers))


def assemble_galerkin(basis: PodBasis, setup: ThermalSetup) -> RomOperators:
    """Project the oracle's discrete operators onto the basis.

    The interior conductance uses the oracle's face-difference gradient, the
    boundary term the same convective exchange, so the reduced model differs
    from the oracle by mode truncation only.
    """
    if basis.grid != setup.grid:
        raise ValueError("basis and setup grids differ")
    op = HeatOperator(setup.grid, setup.material, setup.bc)
    phi = basis.matrix
    cap = op.capacity * (phi.T @ phi)
    g_int = phi.T @ (op.stiffness @ phi)
    hb = op.boundary.ravel()
    g_bnd = phi.T @ (hb[:, None] * phi)
    forcing = hb * setup.bc.ambient_temperature
    if basis.centered:
        forcing = forcing - op.system @ basis.mean.ravel()
    ambient = phi.T @ forcing
    cells = setup.cell_power_map.reshape(len(setup.floorplan.blocks), -1)
    proj = phi.T @ cells.T
    sym = lambda a: 0.5 * (a + a.T)  # noqa: E731
    return RomOperators(sym(cap), sym(g_int), sym(g_bnd), ambient, proj,
                        setup.floorplan.block_names)


def _block_vector(ops: RomOperators, block_powers) -> np.ndarray:
    if isinstance(block_powers, Mapping):
        vec = np.zeros(len(ops.blocks))
        for name, value in block_powers.items():
            if name not in ops.blocks:
                raise KeyError(f"unknown block {name!r}")
            if value < 0:
                raise ValueError(f"negative power for {name!r}")
            vec[ops.blocks.index(name)] += value
        return vec
    vec = np.asarray(block_powers, dtype=float)
    if vec.shape != (len(ops.blocks),):
        raise ValueError("power vector length does not match the block count")
    if np.any(vec < 0):
        raise ValueError("block powers must be non-negative")
    return vec


def project_power(ops: RomOperators, block_powers) -> np.ndarray:
    """Modal power ``P_j``: projected interior source plus the ambient boundary term."""
    return ops.power_projection @ _block_vector(ops, block_powers) + ops.ambient


@dataclass(frozen=True)
class CoefficientTrajectory:
    times: np.ndarray
    coefficients: np.ndarray  # (n_times, M)


class RomStepper:
    """Backward-Euler stepping of the reduced model with a cached factorization."""

    def __init__(self, ops: RomOperators, dt: float, a0):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.ops, self.dt = ops, float(dt)
        self.a = np.array(a0, dtype=float)
        if self.a.shape != (ops.n_modes,):
            raise ValueError(f"a0 must have length {ops.n_modes}")
        self._scaled_cap = ops.capacitance / dt
        self._lu = sla.lu_factor(self._scaled_cap + ops.conductance)

    def step(self, block_powers) -> np.ndarray:
        rhs = self._scaled_cap @ self.a + self.ops.power_projection @ block_powers + self.ops.ambient
        self.a = sla.lu_solve(self._lu, rhs)
        return self.a


def ambient_coefficients(basis: PodBasis, ambient_temperature: float) -> np.ndarray:
    return project(basis, ThermalField.uniform(basis.grid, ambient_temperature))


def integrate(ops: RomOperators, a0, power_trace, dt: float, t_end: float) -> CoefficientTrajectory:
    """Solve ``c da/dt + g a = P(t)`` by backward Euler with zero-order-hold power.

    ``power_trace`` is a :class:`BlockPowerTrace`, a constant block-power
    vector/mapping, or a callable ``t -> block powers``.
    """
    n = t_end / dt
    if abs(n - round(n)) > 1e-6 * max(1.0, n):
        raise ValueError(f"t_end={t_end} is not a multiple of dt={dt}")
    n = int(round(n))
    if isinstance(power_trace, BlockPowerTrace):
        rows = power_trace.sample(dt, n)
    elif callable(power_trace):
        rows = np.array([_block_vector(ops, power_trace(k * dt)) for k in range(n)])
    else:
        rows = np.broadcast_to(_block_vector(ops, power_trace), (n, len(ops.blocks)))
    stepper = RomStepper(ops, dt, a0)
    out = np.empty((n + 1, ops.n_modes))
    out[0] = stepper.a
    for k in range(n):
        out[k + 1] = stepper.step(rows[k])
    return CoefficientTrajectory(np.arange(n + 1) * dt, out)


@dataclass(frozen=True)
class ReducedModel:
    """A basis with its projected operators, plus fast per-core readout."""

    basis: PodBasis
    ops: RomOperators

    @cached_property
    def _core_readout(self):
        return {}

    def core_readout(self, floorplan: Floorplan, cores=None):
        """Matrices mapping coefficients to active-layer temperatures under each core."""
        cores = tuple(floorplan.cores if cores is None else cores)
        key = (floorplan, cores)
        if key not in self._core_readout:
            g = self.basis.grid
            layer = self.basis.modes[:, g.active_layer]
            mats, offsets = [], []
            for c in cores:
                w = footprint_weights(floorplan.block(c), g) > 1e-9 * g.dx * g.dy
                mats.append(layer[:, w].T)
                offsets.append(self.basis.mean[g.active_layer][w] if self.basis.centered
                               else np.zeros(int(w.sum())))
            self._core_readout[key] = (mats, offsets)
        return self._core_readout[key]

    def core_peaks(self, a, floorplan: Floorplan, cores=None) -> np.ndarray:
        mats, offsets = self.core_readout(floorplan, cores)
        return np.array([(m @ a + o).max() for m, o in zip(mats, offsets)])

    def active_layer(self, a) -> np.ndarray:
        g = self.basis.grid
        out = np.tensordot(a, self.basis.modes[:, g.active_layer], axes=1)
        if self.basis.centered:
            out = out + self.basis.mean[g.active_layer]
        return out

    def initial_coefficients(self, ambient_temperature: float) -> np.ndarray:
        return ambient_coefficients(self.basis, ambient_temperature)


def training_traces(floorplan: Floorplan, rng: np.random.Generator, n_traces: int = 4,
                    horizon: float = 0.2, max_power: float = 16.0,
                    min_dwell: float = 2e-3, max_dwell: float = 30e-3,
                    blocks=None) -> list[BlockPowerTrace]:
    """Randomized per-block square waves for POD training.

    Each block in ``blocks`` (default: all) toggles between off and a random
    level up to ``max_power`` (non-core blocks get a quarter of that, scaled
    down by area if smaller than a core) with random dwell times,
    independently of the other blocks. Blocks not listed stay unpowered.
    """
    excited = set(floorplan.block_names if blocks is None else blocks)
    unknown = excited - set(floorplan.block_names)
    if unknown:
        raise KeyError(f"unknown blocks {sorted(unknown)}")
    core_area = np.mean([floorplan.block(c).area for c in floorplan.cores]) if floorplan.cores \
        else np.mean([b.area for b in floorplan.blocks])
    traces = []
    for _ in range(n_traces):
        edges = {0.0}
        per_block = []
        for b in floorplan.blocks:
            if b.name not in excited:
                per_block.append([(0.0, 0.0)])
                continue
            scale = max_power if b.name in floorplan.cores else max_power * 0.25 * min(1.0, b.area / core_area)
            t, on, events = 0.0, bool(rng.integers(2)), []
            while t < horizon:
                events.append((t, rng.uniform(0.2, 1.0) * scale if on else 0.0))
                t += rng.uniform(min_dwell, max_dwell)
                on = not on
            per_block.append(events)
            edges.update(round(e[0], 9) for e in events)
        times = np.array(sorted(edges))
        powers = np.zeros((times.size, len(floorplan.blocks)))
        for j, events in enumerate(per_block):
            et = np.array([e[0] for e in events])
            ev = np.array([e[1] for e in events])
            idx = np.searchsorted(et, times + 1e-12, side="right") - 1
            powers[:, j] = ev[idx]
        traces.append(BlockPowerTrace(times, powers, floorplan.block_names))
    return traces


# -- persistence -----------------------------------------------------------

def _grid_header(grid: Grid) -> dict:
    return {"nx": grid.nx, "ny": grid.ny, "nz": grid.nz, "dx": grid.dx, "dy": grid.dy,
            "dz": grid.dz, "layers": list(grid.layers)}


def _grid_from(h: dict) -> Grid:
    return Grid(h["nx"], h["ny"], h["nz"], h["dx"], h["dy"], h["dz"], tuple(h["layers"]))


def save_basis(basis: PodBasis, path):
    header = {"grid": _grid_header(basis.grid), "M": basis.n_modes, "centered": basis.centered}
    arrays = {"modes": basis.modes, "eigenvalues": basis.eigenvalues,
              "weights": basis.weights, "spectrum": basis.spectrum}
    if basis.centered:
        arrays["mean"] = basis.mean
    return write_container(path, "pod-basis", header, arrays)


def load_basis(path) -> PodBasis:
    h, arr = read_container(path, "pod-basis")
    return PodBasis(_grid_from(h["grid"]), arr["modes"], arr["eigenvalues"], arr["weights"],
                    arr["spectrum"], bool(h["centered"]), arr.get("mean"))


def save_operators(ops: RomOperators, path):
    header = {"M": ops.n_modes, "blocks": list(ops.blocks)}
    arrays = {"capacitance": ops.capacitance, "conductance_interior": ops.conductance_interior,
              "conductance_boundary": ops.conductance_boundary, "ambient": ops.ambient,
              "power_projection": ops.power_projection}
    return write_container(path, "rom-operators", header, arrays)


def load_operators(path) -> RomOperators:
    h, arr = read_container(path, "rom-operators")
    return RomOperators(arr["capacitance"], arr["conductance_interior"],
                        arr["conductance_boundary"], arr["ambient"], arr["power_projection"],
                        tuple(h["blocks"]))
