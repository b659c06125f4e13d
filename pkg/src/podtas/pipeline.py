"""End-to-end helpers: training data generation and model building."""

from __future__ import annotations

import logging

import numpy as np

from .domain import BlockPowerTrace, Floorplan
from .oracle import SnapshotSet, ThermalSetup, run_transient
from .pod import ReducedModel, assemble_galerkin, train, training_traces
from .scheduler import Replay

log = logging.getLogger(__name__)

__all__ = ["task_training_traces", "training_snapshots", "build_model"]


def task_training_traces(tasks, floorplan: Floorplan, horizon: float, dt: float,
                         quantum: float = 1e-3) -> list[BlockPowerTrace]:
    """Each task running periodically on its own core (task ``i`` on core ``i mod m``)."""
    cores = floorplan.cores
    if not cores:
        raise ValueError("floorplan has no cores")
    nq = int(round(horizon / quantum))
    out = []
    for i, task in enumerate(tasks):
        core = cores[i % len(cores)]
        engine = Replay([task], floorplan, (core,), quantum, dt)
        rows = []
        for _ in range(nq):
            engine.boundary()
            rows.append(engine.advance((task.name,)))
        rows = np.concatenate(rows)
        out.append(BlockPowerTrace(np.arange(len(rows)) * dt, rows, floorplan.block_names))
    return out


def training_snapshots(setup: ThermalSetup, rng: np.random.Generator, tasks=(), n_traces=4,
                       horizon=0.5, dt=1e-4, stride=10, blocks=("cores", "northbridge"),
                       max_power=16.0, min_dwell=2e-3, max_dwell=30e-3) -> SnapshotSet:
    """Oracle snapshots under random square waves plus each task's own trace.

    ``blocks`` lists the excited blocks; the entry ``"cores"`` expands to every core.
    """
    fp = setup.floorplan
    excited = []
    for b in blocks:
        excited += list(fp.cores) if b == "cores" else [b]
    traces = training_traces(fp, rng, n_traces, horizon, max_power, min_dwell, max_dwell,
                             blocks=excited) if n_traces else []
    if tasks:
        traces += task_training_traces(tasks, fp, horizon, dt)
    sets = [run_transient(setup, tr, horizon, dt, snapshot_stride=stride) for tr in traces]
    return SnapshotSet.concatenate(sets)


def build_model(snapshots: SnapshotSet, setup: ThermalSetup, modes: int,
                centered: bool = False) -> ReducedModel:
    if modes > len(snapshots):
        raise ValueError(f"requested {modes} modes but only {len(snapshots)} snapshots exist")
    basis = train(snapshots, modes, centered=centered)
    return ReducedModel(basis, assemble_galerkin(basis, setup))
