"""Command-line front end.

Every invocation writes into its own run directory
``<out>/<config hash>-<timestamp>/`` holding the resolved config and the
command's artifacts. Commands that need a trained model look it up among
earlier run directories by a hash of the model-defining config sections.

Exit status: 0 success, 2 configuration error, 3 infeasible schedule,
4 numerical failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from datetime import datetime
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import ConfigError, ExperimentConfig, load_config
from .oracle import ConvergenceError, run_transient
from .pipeline import build_model, training_snapshots
from .pod import ReducedModel, load_basis, load_operators, save_basis, save_operators, \
    training_traces
from .scheduler import load_schedule, pod_tas, rt_tas, save_schedule
from .steady import calibrate, load_coupling, save_coupling

log = logging.getLogger("podtas")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 1, 2, 3, 4

BASIS_FILE, OPERATORS_FILE, MODEL_KEY = "pod_basis.bin", "rom_operators.bin", "model.key"
COUPLING_FILE, COUPLING_KEY = "coupling.txt", "coupling.key"


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"{stage}: {exc}")
        self.stage, self.exc = stage, exc


class Infeasible(RuntimeError):
    pass


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ValueError, KeyError, ConvergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise StageError(name, exc) from exc


# -- run directories -------------------------------------------------------

def _run_dir(cfg: ExperimentConfig, command: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%dT%H%M%S%f")
    d = cfg.out_dir() / f"{cfg.digest()}-{stamp}"
    d.mkdir(parents=True, exist_ok=False)
    (d / "config.toml").write_text(cfg.to_toml(), encoding="utf-8")
    (d / "command.txt").write_text(command + "\n", encoding="utf-8")
    return d


def _find(cfg: ExperimentConfig, key_file: str, key: str, what: str, hint: str) -> Path:
    out = cfg.out_dir()
    hits = sorted(p.parent for p in out.glob(f"*/{key_file}")
                  if p.read_text(encoding="utf-8").strip() == key) if out.is_dir() else []
    if not hits:
        raise ConfigError(f"no trained {what} matching this config under {out}; run '{hint}' first")
    return hits[-1]


def _load_model(cfg: ExperimentConfig) -> ReducedModel:
    d = _find(cfg, MODEL_KEY, cfg.model_key(), "POD model", "podtas train-pod")
    log.info("using model from %s", d)
    return ReducedModel(load_basis(d / BASIS_FILE), load_operators(d / OPERATORS_FILE))


def _load_coupling(cfg: ExperimentConfig):
    d = _find(cfg, COUPLING_KEY, cfg.coupling_key(), "coupling matrix", "podtas train-ss")
    return load_coupling(d / COUPLING_FILE)


# -- commands --------------------------------------------------------------

def cmd_train_pod(cfg: ExperimentConfig, run: Path) -> int:
    p = cfg.pod
    setup = cfg.setup()
    tasks = cfg.task_set() if p.task_traces else ()
    n_snap = (p.n_traces + len(tasks)) * (int(round(p.horizon / p.dt)) // p.snapshot_stride + 1)
    if p.modes > n_snap:
        raise ConfigError(f"pod.modes = {p.modes} exceeds the {n_snap} training snapshots")
    snaps = _stage("oracle snapshots", training_snapshots, setup, np.random.default_rng(cfg.seed),
                   tasks, p.n_traces, p.horizon, p.dt, p.snapshot_stride, p.blocks,
                   p.max_power, p.min_dwell, p.max_dwell)
    model = _stage("POD training", build_model, snaps, setup, p.modes, p.centered)
    save_basis(model.basis, run / BASIS_FILE)
    save_operators(model.ops, run / OPERATORS_FILE)
    (run / MODEL_KEY).write_text(cfg.model_key() + "\n", encoding="utf-8")
    spec = model.basis.spectrum
    kept = model.basis.eigenvalues.sum() / spec.sum()
    print(f"snapshots: {len(snaps)}  modes: {model.basis.n_modes}  "
          f"captured energy: {kept:.12f}")
    for i, lam in enumerate(model.basis.eigenvalues[:min(10, model.basis.n_modes)], 1):
        print(f"  lambda_{i} = {lam:.6e}  ({lam / spec[0]:.3e} of lambda_1)")
    print(f"model written to {run}")
    return EXIT_OK


def cmd_train_ss(cfg: ExperimentConfig, run: Path) -> int:
    coupling = _stage("steady-state calibration", calibrate, cfg.setup())
    save_coupling(coupling, run / COUPLING_FILE)
    (run / COUPLING_KEY).write_text(cfg.coupling_key() + "\n", encoding="utf-8")
    n = len(coupling.blocks)
    print(f"coupling matrix {n}x{n} written to {run / COUPLING_FILE}")
    return EXIT_OK


def cmd_schedule(cfg: ExperimentConfig, run: Path, algorithm: str) -> int:
    sc = cfg.scheduler_config()
    fp = cfg.floorplan()
    tasks = cfg.task_set()
    if algorithm == "pod-tas":
        model = _load_model(cfg)
        result = _stage("pod-tas", pod_tas, tasks, sc, model, fp)
        schedule = result.schedule
        with open(run / "construction.log", "w", encoding="utf-8") as fh:
            fh.write("tick,time_ms,core,state,temp_C,task\n")
            for tick, temps, states, assignment in result.decisions:
                for core, st, t, a in zip(schedule.cores, states, temps, assignment):
                    fh.write(f"{tick},{tick * sc.quantum * 1e3:.12g},{core},{st},{t!r},"
                             f"{a or 'IDLE'}\n")
        print(f"predicted peak core temperature: {result.core_temperatures.max():.3f} C; "
              f"max one-quantum rise {result.max_quantum_rise:.3f} C")
    else:
        coupling = _load_coupling(cfg)
        schedule = _stage("rt-tas", rt_tas, tasks, fp, coupling, sc, refine=cfg.scheduler.refine)
        with open(run / "construction.log", "w", encoding="utf-8") as fh:
            fh.write("tick,time_ms,core,task\n")
            for tick, assignment in schedule.entries:
                for core, a in zip(schedule.cores, assignment):
                    fh.write(f"{tick},{tick * sc.quantum * 1e3:.12g},{core},{a or 'IDLE'}\n")
    path = save_schedule(schedule, run / "schedule.txt")
    print(f"{algorithm}: {len(schedule.entries)} decisions "
          f"({schedule.assignment_frequency():.1f} per s) written to {path}")
    if not schedule.valid:
        name, t = schedule.misses[0]
        raise Infeasible(f"{len(schedule.misses)} deadline misses; earliest: {name} at "
                         f"{t * 1e3:.12g} ms")
    return EXIT_OK


def _evaluate(cfg: ExperimentConfig, schedule_path, rom: bool = False):
    schedule = _stage("loading schedule", load_schedule, schedule_path)
    model = _load_model(cfg) if rom else None
    timeline = _stage("evaluation", ev.evaluate_schedule, schedule, cfg.task_set(), cfg.setup(),
                      cfg.evaluation.dt, cfg.scheduler.idle_power, model)
    return timeline, ev.metrics(timeline, cfg.evaluation.warmup)


def cmd_evaluate(cfg: ExperimentConfig, run: Path, schedule_path, rom: bool = False) -> int:
    timeline, report = _evaluate(cfg, schedule_path, rom)
    ev.save_timeline(timeline, run / "timeline.csv")
    ev.save_metrics(report, run / "metrics.txt")
    for k, v in report.as_dict().items():
        print(f"{ev.METRIC_LABELS[k]:>11}: {v:.6g}")
    print(f"timeline and metrics written to {run}")
    return EXIT_OK


def _report(cfg, path) -> ev.MetricsReport:
    head = Path(path).read_text(encoding="utf-8").split("\n", 1)[0]
    if head.startswith("# podtas-schedule"):
        return _evaluate(cfg, path)[1]
    return _stage("loading metrics", ev.load_metrics, path)


def cmd_compare(cfg: ExperimentConfig, run: Path, a, b) -> int:
    ra, rb = _report(cfg, a), _report(cfg, b)
    ev.save_metrics(ra, run / "metrics_a.txt")
    ev.save_metrics(rb, run / "metrics_b.txt")
    table = _stage("comparison", ev.format_comparison, ra, rb, "a", "b")
    (run / "comparison.csv").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, run: Path, kind: str, modes=None, jobs: int = 1) -> int:
    setup = cfg.setup()
    if kind == "modes":
        p = cfg.pod
        modes = tuple(modes or cfg.sweep.modes)
        tasks = cfg.task_set() if p.task_traces else ()
        snaps = _stage("oracle snapshots", training_snapshots, setup,
                       np.random.default_rng(cfg.seed), tasks, p.n_traces, p.horizon, p.dt,
                       p.snapshot_stride, p.blocks, p.max_power, p.min_dwell, p.max_dwell)
        if max(modes) > len(snaps):
            raise ConfigError(f"mode count {max(modes)} exceeds the {len(snaps)} snapshots")
        excited = [c for b in p.blocks for c in (setup.floorplan.cores if b == "cores" else [b])]
        horizon = cfg.sweep.test_horizon
        test = training_traces(setup.floorplan, np.random.default_rng(cfg.seed + 1000), 1,
                               horizon, p.max_power, p.min_dwell, p.max_dwell, blocks=excited)[0]
        truth = _stage("oracle test run", run_transient, setup, test, horizon, p.dt,
                       snapshot_stride=p.snapshot_stride)
        rows = _stage("mode sweep", ev.mode_sweep, snaps, setup, test, horizon, modes, p.dt,
                      p.snapshot_stride, p.centered, truth)
        lines = ["modes,avg_lse_percent,avg_max_temp_lse_percent"]
        lines += [f"{m},{a!r},{b!r}" for m, a, b in rows]
        path = run / "mode_sweep.csv"
    else:
        model = _load_model(cfg)
        points = _stage("threshold sweep", ev.threshold_sweep, cfg.task_set(), cfg.sweep.t_cool,
                        cfg.sweep.t_hot, cfg.scheduler_config(), model, setup.floorplan, jobs)
        path = ev.save_sweep(points, run / "threshold_sweep.csv")
        lines = None
    if lines is not None:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(path.read_text(encoding="utf-8"), end="")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------

def _mode_list(text: str):
    try:
        values = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("mode counts must be positive")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output root directory")
    common.add_argument("--tc", type=float, help="override T_C (deg C)")
    common.add_argument("--th", type=float, help="override T_H (deg C)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="podtas", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train-pod", parents=[common], help="train the POD reduced model")
    p.add_argument("--modes", type=int, help="number of POD modes")
    sub.add_parser("train-ss", parents=[common], help="calibrate the steady-state coupling matrix")
    p = sub.add_parser("schedule", parents=[common], help="build a schedule")
    p.add_argument("--algorithm", choices=("pod-tas", "rt-tas"), default="pod-tas")
    p = sub.add_parser("evaluate", parents=[common], help="replay a schedule through the oracle")
    p.add_argument("schedule", type=Path)
    p.add_argument("--rom", action="store_true", help="use the reduced model instead of the oracle")
    p = sub.add_parser("compare", parents=[common], help="compare two schedules or metrics files")
    p.add_argument("a", type=Path, help="schedule or metrics file (e.g. POD-TAS)")
    p.add_argument("b", type=Path, help="baseline schedule or metrics file (e.g. RT-TAS)")
    p = sub.add_parser("sweep", parents=[common], help="mode-count or threshold sweep")
    p.add_argument("kind", choices=("modes", "thresholds"))
    p.add_argument("--modes", type=_mode_list, help="comma-separated mode counts")
    p.add_argument("--jobs", type=int, default=1, help="concurrent threshold evaluations")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = {"seed": args.seed, "paths.out": args.out, "scheduler.t_cool": args.tc,
            "scheduler.t_hot": args.th}
    if args.command == "train-pod":
        over["pod.modes"] = args.modes
    try:
        cfg = cfg.with_overrides(**over)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if getattr(args, "jobs", 1) < 1:
        raise ConfigError("--jobs must be >= 1")
    for attr in ("schedule", "a", "b"):
        path = getattr(args, attr, None)
        if path is not None and not path.is_file():
            raise ConfigError(f"file not found: {path}")
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        run = _run_dir(cfg, " ".join(["podtas"] + list(sys.argv[1:] if argv is None else argv)))
        if args.command == "train-pod":
            return cmd_train_pod(cfg, run)
        if args.command == "train-ss":
            return cmd_train_ss(cfg, run)
        if args.command == "schedule":
            return cmd_schedule(cfg, run, args.algorithm)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, run, args.schedule, args.rom)
        if args.command == "compare":
            return cmd_compare(cfg, run, args.a, args.b)
        return cmd_sweep(cfg, run, args.kind, args.modes, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except StageError as exc:
        if isinstance(exc.exc, ConfigError):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        numerical = isinstance(exc.exc, (ConvergenceError, np.linalg.LinAlgError,
                                         FloatingPointError))
        print(f"{'numerical failure' if numerical else 'error'} in {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if numerical else EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
