"""Steady-state block coupling model used by the RT-TAS baseline.

Column ``j`` of the coupling matrix is the block-average steady temperature
rise of every block per watt dissipated in block ``j`` alone. Because the
stationary problem is linear, predictions for any power vector follow by
superposition.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import block_average, rasterize_power
from .oracle import ThermalSetup, solve_steady

__all__ = ["CouplingMatrix", "calibrate", "predict_steady", "save_coupling", "load_coupling"]


@dataclass(frozen=True)
class CouplingMatrix:
    blocks: tuple[str, ...]
    coefficients: np.ndarray  # degC/W, [i, j] = rise of block i per watt in block j
    ambient_temperature: float

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float)
        if c.shape != (len(self.blocks), len(self.blocks)):
            raise ValueError("coupling matrix must be n_blocks x n_blocks")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)
        object.__setattr__(self, "blocks", tuple(self.blocks))

    def index(self, name: str) -> int:
        return self.blocks.index(name)


def calibrate(setup: ThermalSetup, unit_power: float = 1.0, blocks=None) -> CouplingMatrix:
    """One stationary oracle solve per block with ``unit_power`` watts applied to it alone."""
    if not unit_power > 0:
        raise ValueError("unit_power must be positive")
    fp = setup.floorplan
    names = fp.block_names
    amb = setup.bc.ambient_temperature
    coeffs = np.zeros((len(names), len(names)))
    for j, name in enumerate(names):
        field = solve_steady(setup.grid, setup.material, setup.bc,
                             rasterize_power(fp, {name: unit_power}, setup.grid))
        coeffs[:, j] = [(block_average(field, fp, b) - amb) / unit_power for b in names]
    return CouplingMatrix(names, coeffs, amb)


def predict_steady(coupling: CouplingMatrix, block_powers) -> np.ndarray:
    """Equilibrium block temperatures ``T_amb + coupling @ p``."""
    if isinstance(block_powers, dict):
        p = np.zeros(len(coupling.blocks))
        for name, value in block_powers.items():
            p[coupling.index(name)] += value
    else:
        p = np.asarray(block_powers, dtype=float)
    if p.shape != (len(coupling.blocks),):
        raise ValueError(f"expected {len(coupling.blocks)} block powers, got shape {p.shape}")
    if np.any(p < 0):
        raise ValueError("block powers must be non-negative")
    return coupling.ambient_temperature + coupling.coefficients @ p


def save_coupling(coupling: CouplingMatrix, path) -> Path:
    """Labeled text matrix: header of block names, then one row per block (degC/W)."""
    lines = [
        "# steady-state thermal coupling, degC per W; row = observed block, column = heated block",
        f"# ambient_temperature = {coupling.ambient_temperature!r}",
        "block " + " ".join(coupling.blocks),
    ]
    for name, row in zip(coupling.blocks, coupling.coefficients):
        lines.append(name + " " + " ".join(repr(float(v)) for v in row))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_coupling(path) -> CouplingMatrix:
    ambient, header, rows = None, None, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            if key.strip() == "ambient_temperature":
                ambient = float(value)
            continue
        if not line.strip():
            continue
        parts = line.split()
        if header is None:
            header = tuple(parts[1:])
            continue
        if parts[0] != header[len(rows)]:
            raise ValueError(f"row {parts[0]!r} out of order in {path}")
        rows.append([float(v) for v in parts[1:]])
    if ambient is None or header is None:
        raise ValueError(f"{path}: missing ambient temperature or header")
    return CouplingMatrix(header, np.array(rows), ambient)
