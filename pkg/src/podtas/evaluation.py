"""Replay schedules through the oracle (or the reduced model) and score them.

All spatial statistics are taken over the active layer. Variances are
population variances (divide by ``n``), both across cells and across time.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .domain import Floorplan, Schedule, ThermalField, footprint_weights
from .oracle import DnsSolver, SnapshotSet, ThermalSetup, run_transient
from .pod import ReducedModel, RomStepper, assemble_galerkin, integrate, train
from .scheduler import PodTasResult, SchedulerConfig, pod_tas, replay_schedule

log = logging.getLogger(__name__)

__all__ = [
    "TemperatureTimeline",
    "MetricsReport",
    "SweepPoint",
    "spatial_stats",
    "evaluate_schedule",
    "metrics",
    "percent_difference",
    "compare_reports",
    "format_comparison",
    "save_timeline",
    "load_timeline",
    "save_metrics",
    "load_metrics",
    "mode_sweep",
    "threshold_sweep",
    "save_sweep",
]


@dataclass(frozen=True)
class TemperatureTimeline:
    times: np.ndarray
    t_min: np.ndarray
    t_mean: np.ndarray
    t_max: np.ndarray
    variance: np.ndarray
    core_peaks: np.ndarray | None = None  # (n_times, n_cores) when requested

    def __post_init__(self):
        n = len(self.times)
        if any(len(a) != n for a in (self.t_min, self.t_mean, self.t_max, self.variance)):
            raise ValueError("timeline series lengths differ")

    def __len__(self):
        return len(self.times)


def spatial_stats(field) -> tuple[float, float, float, float]:
    """``(min, mean, max, variance)`` of the active layer of a field.

    ``field`` is a :class:`ThermalField` or an array of active-layer values.
    """
    layer = field.active if isinstance(field, ThermalField) else np.asarray(field, float)
    if layer.size == 0:
        raise ValueError("empty layer")
    mean = layer.mean()
    return float(layer.min()), float(mean), float(layer.max()), float(np.mean((layer - mean) ** 2))


def _core_masks(floorplan: Floorplan, grid, cores):
    return [footprint_weights(floorplan.block(c), grid) > 1e-9 * grid.dx * grid.dy for c in cores]


def evaluate_schedule(schedule: Schedule, tasks, setup: ThermalSetup, dt: float = 1e-5,
                      idle_power: float = 0.0, model: ReducedModel | None = None,
                      core_peaks: bool = False) -> TemperatureTimeline:
    """Run a schedule's power trace from uniform ambient and record active-layer statistics.

    With ``model`` the reduced model stands in for the oracle (starting from
    its zero-power equilibrium, as the scheduler does). Statistics are
    recorded at ``t = 0`` and after every step.
    """
    spq = schedule.quantum / dt
    if abs(spq - round(spq)) > 1e-9 * spq or round(spq) < 1:
        raise ValueError(f"dt={dt} does not divide the decision quantum {schedule.quantum}")
    fp, grid = setup.floorplan, setup.grid
    rows, _ = replay_schedule(schedule, tasks, fp, dt, idle_power)
    n = rows.shape[0]
    out = np.empty((n + 1, 4))
    masks = _core_masks(fp, grid, schedule.cores) if core_peaks else None
    peaks = np.empty((n + 1, len(schedule.cores))) if core_peaks else None
    if model is None:
        solver = DnsSolver(setup, dt)
        layer = solver.active_temperature
        advance = solver.step
    else:
        stepper = RomStepper(model.ops, dt, model.ops.equilibrium(np.zeros(len(model.ops.blocks))))
        layer = lambda: model.active_layer(stepper.a)  # noqa: E731
        advance = stepper.step
    for k in range(n + 1):
        if k:
            advance(rows[k - 1])
        t = layer()
        out[k] = spatial_stats(t)
        if core_peaks:
            peaks[k] = [t[m].max() for m in masks]
    return TemperatureTimeline(np.arange(n + 1) * dt, *out.T.copy(), core_peaks=peaks)


@dataclass(frozen=True)
class MetricsReport:
    """Evaluation metrics in the comparison table's column order."""

    peak_temp: float
    peak_var: float
    var_mean: float
    var_max: float
    var_var: float

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, float(getattr(self, f.name)))
        values = [getattr(self, f.name) for f in fields(self)]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("metrics must be finite")
        if min(self.peak_var, self.var_mean, self.var_max, self.var_var) < 0:
            raise ValueError("variances must be non-negative")

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


METRIC_LABELS = {
    "peak_temp": "Peak Temp.",
    "peak_var": "Peak Var.",
    "var_mean": "Var(Mean)",
    "var_max": "Var(Max)",
    "var_var": "Var(Var)",
}


def _pvar(x: np.ndarray) -> float:
    return float(np.mean((x - x.mean()) ** 2))


def metrics(timeline: TemperatureTimeline, warmup: float = 0.0) -> MetricsReport:
    """Peak temperature and variance metrics; ``warmup`` seconds may be excluded."""
    keep = timeline.times >= warmup - 1e-12
    if not keep.any():
        raise ValueError("warm-up window leaves an empty timeline")
    mx, mean, var = timeline.t_max[keep], timeline.t_mean[keep], timeline.variance[keep]
    return MetricsReport(float(mx.max()), float(var.max()), _pvar(mean), _pvar(mx), _pvar(var))


def percent_difference(a: float, b: float) -> float:
    """``100 (a - b) / b``, the change of ``a`` relative to baseline ``b``."""
    if b == 0:
        raise ZeroDivisionError("baseline value is zero")
    return 100.0 * (a - b) / b


def compare_reports(a: MetricsReport, b: MetricsReport) -> dict[str, float]:
    return {k: percent_difference(getattr(a, k), getattr(b, k)) for k in METRIC_LABELS}


def format_comparison(a: MetricsReport, b: MetricsReport, name_a="pod-tas", name_b="rt-tas") -> str:
    """CSV table: one row per metric with both values and the percent difference."""
    diff = compare_reports(a, b)
    lines = [f"metric,{name_a},{name_b},percent_difference"]
    for key, label in METRIC_LABELS.items():
        lines.append(f"{label},{getattr(a, key)!r},{getattr(b, key)!r},{diff[key]!r}")
    return "\n".join(lines) + "\n"


def save_timeline(timeline: TemperatureTimeline, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "min_C", "mean_C", "max_C", "var"])
        for row in zip(timeline.times, timeline.t_min, timeline.t_mean, timeline.t_max,
                       timeline.variance):
            w.writerow([repr(float(v)) for v in row])
    return path


def load_timeline(path) -> TemperatureTimeline:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return TemperatureTimeline(*data.T.copy())


def save_metrics(report: MetricsReport, path) -> Path:
    path = Path(path)
    path.write_text("".join(f"{k} = {v!r}\n" for k, v in report.as_dict().items()),
                    encoding="utf-8")
    return path


def load_metrics(path) -> MetricsReport:
    values = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            values[key.strip()] = float(value)
    return MetricsReport(**{k: values[k] for k in METRIC_LABELS})


# -- experiments -----------------------------------------------------------

def _lse_series(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, truth.ndim))
    return 100.0 * np.sqrt(((pred - truth) ** 2).sum(axis=axes) / (truth ** 2).sum(axis=axes))


def mode_sweep(snapshots: SnapshotSet, setup: ThermalSetup, test_trace, t_end: float,
               modes, dt: float | None = None, stride: int = 10, centered: bool = False,
               truth: SnapshotSet | None = None) -> list[tuple[int, float, float]]:
    """Time-averaged whole-chip LSE and max-temperature LSE of the reduced model per mode count.

    The reference is an oracle run of ``test_trace`` (computed once, or
    passed as ``truth``) sampled every ``stride`` steps of ``dt``.
    """
    dt = snapshots.dt if dt is None else dt
    if max(modes) > len(snapshots):
        raise ValueError(f"mode count {max(modes)} exceeds the {len(snapshots)} snapshots")
    if truth is None:
        truth = run_transient(setup, test_trace, t_end, dt, snapshot_stride=stride)
    z = setup.grid.active_layer
    true_max = truth.fields[:, z].reshape(len(truth), -1).max(axis=1)
    full = train(snapshots, max(modes), centered=centered)
    rows = []
    for m in sorted(modes):
        basis = full.truncate(m) if m < full.n_modes else full
        ops = assemble_galerkin(basis, setup)
        a0 = ops.equilibrium(np.zeros(len(ops.blocks)))
        traj = integrate(ops, a0, test_trace, dt, t_end)
        a = traj.coefficients[::stride]
        pred = np.tensordot(a, basis.modes, axes=1)
        if basis.centered:
            pred = pred + basis.mean
        whole = _lse_series(pred, truth.fields)
        pmax = pred[:, z].reshape(len(a), -1).max(axis=1)
        rows.append((basis.n_modes, float(whole.mean()),
                     float(_lse_series(pmax[:, None], true_max[:, None]).mean())))
    return rows


@dataclass(frozen=True)
class SweepPoint:
    t_cool: float
    t_hot: float
    valid: bool  # False when T_C >= T_H (not run)
    feasible: bool
    frequency: float  # decisions per second
    misses: int = 0
    peak: float = math.nan  # predicted peak core temperature
    max_quantum_rise: float = math.nan
    result: PodTasResult | None = field(default=None, repr=False, compare=False)

    @property
    def overshoot(self) -> float:
        return self.peak - self.t_hot


def _sweep_one(args):
    tasks, config, model, floorplan, keep = args
    r = pod_tas(tasks, config, model, floorplan)
    return (r.schedule.valid, r.schedule.assignment_frequency(), len(r.schedule.misses),
            float(r.core_temperatures.max()), r.max_quantum_rise, r if keep else None)


def threshold_sweep(tasks, t_cool_grid, t_hot_grid, config: SchedulerConfig,
                    model: ReducedModel, floorplan: Floorplan, jobs: int = 1,
                    keep_results: bool = False) -> list[SweepPoint]:
    """Run POD-TAS at every ``(T_C, T_H)`` pair; invalid pairs are recorded, not run.

    Points are ordered by ``T_H`` then ``T_C``. With ``keep_results`` each
    point carries its full :class:`PodTasResult`.
    """
    pairs = [(float(c), float(h)) for h in t_hot_grid for c in t_cool_grid]
    if not all(math.isfinite(v) for p in pairs for v in p):
        raise ValueError("threshold grids must be finite")
    valid = [(c, h) for c, h in pairs if c < h]
    work = [(tasks, replace(config, t_cool=c, t_hot=h), model, floorplan, keep_results)
            for c, h in valid]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, work))
    else:
        results = [_sweep_one(w) for w in work]
    done = dict(zip(valid, results))
    out = []
    for c, h in pairs:
        if (c, h) in done:
            out.append(SweepPoint(c, h, True, *done[(c, h)]))
        else:
            out.append(SweepPoint(c, h, False, False, math.nan))
    return out


def save_sweep(points, path) -> Path:
    """Threshold sweep CSV, one row per ``(T_C, T_H)`` pair."""
    lines = ["t_cool,t_hot,valid,feasible,frequency_hz,misses,peak_C,max_quantum_rise_C"]
    for p in points:
        lines.append(f"{p.t_cool!r},{p.t_hot!r},{int(p.valid)},{int(p.feasible)},{p.frequency!r},"
                     f"{p.misses},{p.peak!r},{p.max_quantum_rise!r}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
