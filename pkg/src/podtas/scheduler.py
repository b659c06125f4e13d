"""POD-TAS and the RT-TAS steady-state baseline.

Both schedulers emit a :class:`~podtas.domain.Schedule`: decision ticks (in
units of the decision quantum) with a core to task assignment that holds
until the next entry. An assignment gives a core permission to run the
task's current job. A core idles when its task has no pending job.

Jobs are released periodically. A job still unfinished at its deadline is
recorded as a miss and dropped. Everything that executes a schedule (power
traces, deadline checks, the schedulers themselves) goes through
:class:`Replay`, which advances in integer steps so the accounting is exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import BlockPowerTrace, Floorplan, Schedule, Task
from .pod import ReducedModel, RomStepper
from .steady import CouplingMatrix, predict_steady

log = logging.getLogger(__name__)

__all__ = [
    "CoreState",
    "SchedulerConfig",
    "TaskProgress",
    "Replay",
    "PodTasResult",
    "update_states",
    "select_tasks",
    "assign_tasks",
    "pod_tas",
    "rt_tas",
    "wfd_partition",
    "build_power_trace",
    "replay_schedule",
    "save_schedule",
    "load_schedule",
]

COOL, WARM, HOT = "C", "W", "H"
IDLE, RUNNING = "I", "R"


def _ratio(a: float, b: float, what: str) -> int:
    r = a / b
    n = int(round(r))
    if n < 1 or abs(r - n) > 1e-9 * max(1.0, r):
        raise ValueError(f"{what} must be a positive integer multiple ({a} / {b} = {r})")
    return n


@dataclass(frozen=True)
class CoreState:
    thermal: str
    execution: str

    def __post_init__(self):
        if self.thermal not in (COOL, WARM, HOT) or self.execution not in (IDLE, RUNNING):
            raise ValueError(f"invalid core state {self}")
        if self.thermal == HOT and self.execution == RUNNING:
            raise ValueError("a hot core cannot be running")

    def __str__(self):
        return f"({self.thermal},{self.execution})"


@dataclass(frozen=True)
class SchedulerConfig:
    t_cool: float = 70.0
    t_hot: float = 75.0
    quantum: float = 1e-3
    dt: float = 1e-4
    t_end: float = 2.0
    idle_power: float = 0.0

    def __post_init__(self):
        if not self.t_cool < self.t_hot:
            raise ValueError(f"need T_C < T_H, got T_C={self.t_cool}, T_H={self.t_hot}")
        if not (self.quantum > 0 and self.dt > 0 and self.t_end > 0):
            raise ValueError("quantum, dt and t_end must be positive")
        _ratio(self.quantum, self.dt, "quantum / dt")
        _ratio(self.t_end, self.quantum, "t_end / quantum")
        if self.idle_power < 0:
            raise ValueError("idle_power must be non-negative")

    @property
    def steps_per_quantum(self) -> int:
        return _ratio(self.quantum, self.dt, "quantum / dt")

    @property
    def n_quanta(self) -> int:
        return _ratio(self.t_end, self.quantum, "t_end / quantum")


@dataclass(frozen=True)
class TaskProgress:
    """Progress of a task's current job; times in seconds."""

    name: str
    wcet: float
    executed: float
    pending: bool
    completed: int = 0
    missed: int = 0

    def __post_init__(self):
        if not -1e-12 <= self.executed <= self.wcet * (1 + 1e-12):
            raise ValueError(f"executed time of {self.name!r} outside [0, wcet]")

    @property
    def remaining(self) -> float:
        """Time left on the current job, zero when nothing is pending."""
        return self.wcet - self.executed if self.pending else 0.0


class Replay:
    """Step-exact execution of core assignments for a periodic task set.

    Periods and deadlines must be whole decision quanta so releases and
    deadline checks coincide with decision boundaries; a job may complete
    mid-quantum, after which its core idles until the next boundary.
    """

    def __init__(self, tasks, floorplan: Floorplan, cores, quantum: float, dt: float,
                 idle_power: float = 0.0):
        self.tasks = {t.name: t for t in tasks}
        if len(self.tasks) != len(tasks):
            raise ValueError("duplicate task names")
        self.floorplan = floorplan
        self.cores = tuple(cores)
        self.dt = float(dt)
        self.quantum = float(quantum)
        self.spq = _ratio(quantum, dt, "quantum / dt")
        self.idle = np.zeros(len(floorplan.blocks))
        self._core_idx = [floorplan.index(c) for c in self.cores]
        self._idle_power = float(idle_power)
        self.names = sorted(self.tasks)
        self.wcet_steps, self.period_q, self.deadline_q = {}, {}, {}
        for name, t in self.tasks.items():
            self.wcet_steps[name] = max(1, int(np.ceil(t.wcet / dt - 1e-9)))
            self.period_q[name] = _ratio(t.period, quantum, f"period of {name!r} / quantum")
            self.deadline_q[name] = _ratio(t.deadline, quantum, f"deadline of {name!r} / quantum")
        self._rows = {}
        self.tick = 0
        self.executed = dict.fromkeys(self.names, 0)
        self.pending = dict.fromkeys(self.names, False)
        self.release = dict.fromkeys(self.names, 0)
        self.completed = dict.fromkeys(self.names, 0)
        self.busy_steps = dict.fromkeys(self.names, 0)
        self.misses: list[tuple[str, float]] = []
        self._dirty = False

    def rows(self, name: str, core: str) -> np.ndarray:
        """Block power rows of ``name`` on ``core`` at every execution step."""
        key = (name, core)
        if key not in self._rows:
            task = self.tasks[name]
            cols = np.zeros((len(task.trace_columns), len(self.floorplan.blocks)))
            for i, col in enumerate(task.trace_columns):
                cols[i, self.floorplan.index(core if col == "core" else col)] = 1.0
            self._rows[key] = task.sampled(self.dt, self.wcet_steps[name]) @ cols
        return self._rows[key]

    def boundary(self) -> bool:
        """Process deadlines then releases at the current tick; report ready-set changes."""
        changed, self._dirty = self._dirty, False
        k = self.tick
        for name in self.names:
            if self.pending[name] and k == self.release[name] + self.deadline_q[name]:
                self.misses.append((name, k * self.quantum))
                self.pending[name] = False
                changed = True
            if k % self.period_q[name] == 0:
                if self.pending[name]:  # deadline == period handled above, so unreachable
                    raise AssertionError("job released while the previous one is pending")
                self.pending[name], self.executed[name], self.release[name] = True, 0, k
                changed = True
        return changed

    def ready(self) -> list[str]:
        return [n for n in self.names if self.pending[n]]

    def progress(self) -> dict[str, TaskProgress]:
        return {n: TaskProgress(n, self.wcet_steps[n] * self.dt, self.executed[n] * self.dt,
                                self.pending[n], self.completed[n],
                                sum(1 for m, _ in self.misses if m == n))
                for n in self.names}

    def advance(self, assignment, power: bool = True):
        """Run one quantum; returns ``(spq, n_blocks)`` block power rows (or None)."""
        if len(assignment) != len(self.cores):
            raise ValueError("assignment does not cover every core")
        out = np.zeros((self.spq, len(self.idle))) if power else None
        for core, bi, name in zip(self.cores, self._core_idx, assignment):
            ran = 0
            if name is not None:
                if name not in self.tasks:
                    raise KeyError(f"schedule references unknown task {name!r}")
                if self.pending[name]:
                    e = self.executed[name]
                    ran = min(self.spq, self.wcet_steps[name] - e)
                    if power:
                        out[:ran] += self.rows(name, core)[e:e + ran]
                    self.executed[name] = e + ran
                    self.busy_steps[name] += ran
                    if self.executed[name] == self.wcet_steps[name]:
                        self.pending[name] = False
                        self.completed[name] += 1
                        self._dirty = True
            if power and self._idle_power:
                out[ran:, bi] += self._idle_power
        self.tick += 1
        return out


def classify(temp: float, config: SchedulerConfig, previous: CoreState | None = None) -> str:
    """Thermal band of a core, with hysteresis: a hot core stays hot until below T_C."""
    if previous is not None and previous.thermal == HOT and temp >= config.t_cool:
        return HOT
    if temp < config.t_cool:
        return COOL
    if temp < config.t_hot:
        return WARM
    return HOT


def update_states(cores, temps, assignment, config: SchedulerConfig, previous=None):
    """Core state management: classify each core and revoke tasks from hot cores.

    Returns ``(states, assignment)`` where the assignment has hot cores idled.
    """
    temps = np.asarray(temps, dtype=float)
    if temps.shape != (len(cores),) or not np.all(np.isfinite(temps)):
        raise ValueError("need one finite temperature per core")
    previous = previous or (None,) * len(cores)
    states, revised = [], []
    for t, task, prev in zip(temps, assignment, previous):
        thermal = classify(t, config, prev)
        if thermal == HOT:
            task = None
        states.append(CoreState(thermal, IDLE if task is None else RUNNING))
        revised.append(task)
    return tuple(states), tuple(revised)


def _eligible(state: CoreState) -> bool:
    return not (state.thermal == HOT and state.execution == IDLE)


def select_tasks(progress, cores, states) -> list[str]:
    """Tasks to run: the longest remaining jobs, one per eligible core.

    ``progress`` maps names to :class:`TaskProgress`; ties go to the
    lexicographically smaller name.
    """
    n_slots = sum(_eligible(s) for s in states)
    ready = [p for p in progress.values() if p.remaining > 0]
    ready.sort(key=lambda p: (-p.remaining, p.name))
    return [p.name for p in ready[:n_slots]]


def assign_tasks(selected, cores, states, temps) -> tuple:
    """Selected task ``k`` goes to the ``k``-th coolest eligible core (ties by core index)."""
    order = sorted((i for i, s in enumerate(states) if _eligible(s)),
                   key=lambda i: (float(temps[i]), i))
    if len(selected) > len(order):
        raise ValueError("more selected tasks than eligible cores")
    out = [None] * len(cores)
    for name, i in zip(selected, order):
        out[i] = name
    return tuple(out)


@dataclass
class PodTasResult:
    """A POD-TAS schedule with the reduced model's view of its construction."""

    schedule: Schedule
    times: np.ndarray  # prediction instants (s)
    core_temperatures: np.ndarray  # (n_times, n_cores) predicted core peaks
    states: list  # per quantum: tuple of CoreState held during that quantum
    decisions: list = field(default_factory=list)  # (tick, temps, states, assignment)
    max_quantum_rise: float = 0.0
    progress: dict = field(default_factory=dict)

    @property
    def max_overshoot(self) -> float:
        """Largest predicted core temperature above T_H (negative if never reached)."""
        return float(self.core_temperatures.max() - self.schedule.t_hot)


def pod_tas(tasks, config: SchedulerConfig, model: ReducedModel, floorplan: Floorplan,
            cores=None, a0=None) -> PodTasResult:
    """Build a POD-TAS schedule using the reduced model for temperature prediction.

    At each decision boundary core states are updated from the predicted
    core temperatures; a new selection and assignment is made when a core
    newly turns hot, a hot core cools below T_C, or the set of ready jobs
    changes. Between boundaries the reduced model advances in steps of
    ``config.dt`` under the power of the current assignment.
    """
    cores = tuple(floorplan.cores if cores is None else cores)
    engine = Replay(tasks, floorplan, cores, config.quantum, config.dt, config.idle_power)
    if a0 is None:
        a0 = model.ops.equilibrium(np.zeros(len(model.ops.blocks)))
    stepper = RomStepper(model.ops, config.dt, a0)
    mats, offsets = model.core_readout(floorplan, cores)

    def peaks(a):
        return np.array([(m @ a + o).max() for m, o in zip(mats, offsets)])

    nq, spq = config.n_quanta, config.steps_per_quantum
    temps_out = np.empty((nq * spq + 1, len(cores)))
    temps_out[0] = temps = peaks(stepper.a)
    assignment, states = (None,) * len(cores), None
    entries, history, decisions = [], [], []
    max_rise = 0.0
    for k in range(nq):
        changed = engine.boundary()
        new_states, revoked = update_states(cores, temps, assignment, config, states)
        prev = states or (None,) * len(cores)
        turned_hot = any(s.thermal == HOT and (p is None or p.thermal != HOT)
                         for s, p in zip(new_states, prev))
        cooled = any(p is not None and p.thermal == HOT and s.thermal != HOT
                     for s, p in zip(new_states, prev))
        if k == 0 or changed or turned_hot or cooled:
            selected = select_tasks(engine.progress(), cores, new_states)
            assignment = assign_tasks(selected, cores, new_states, temps)
            new_states = tuple(CoreState(s.thermal, IDLE if a is None else RUNNING)
                               for s, a in zip(new_states, assignment))
            entries.append((k, assignment))
            decisions.append((k, temps.copy(), new_states, assignment))
        else:
            assignment = revoked
        states = new_states
        history.append(states)
        rows = engine.advance(assignment)
        start = temps
        for j in range(spq):
            temps_out[k * spq + j + 1] = peaks(stepper.step(rows[j]))
        block = temps_out[k * spq + 1:(k + 1) * spq + 1]
        max_rise = max(max_rise, float((block.max(axis=0) - start).max()))
        temps = temps_out[(k + 1) * spq]
    # deadlines falling exactly on the horizon
    engine.boundary()
    schedule = Schedule(config.quantum, config.t_end, cores, entries, "pod-tas",
                        config.t_cool, config.t_hot, not engine.misses, engine.misses)
    if engine.misses:
        log.info("pod-tas (%g, %g): %d deadline misses, first %s", config.t_cool,
                 config.t_hot, len(engine.misses), engine.misses[0])
    return PodTasResult(schedule, np.arange(nq * spq + 1) * config.dt, temps_out, history,
                        decisions, max_rise, engine.progress())


# -- RT-TAS baseline ---------------------------------------------------------

def _average_power(task: Task, floorplan: Floorplan, core: str) -> np.ndarray:
    """Long-run block power of a task placed on ``core``: utilization times its mean power."""
    return task.utilization * task.block_power(floorplan, core, task.mean_power())


def _core_temps(coupling: CouplingMatrix, floorplan, cores, load) -> np.ndarray:
    t = predict_steady(coupling, load)
    return np.array([t[coupling.index(c)] for c in cores])


def wfd_partition(tasks, floorplan: Floorplan, coupling: CouplingMatrix, cores=None,
                  refine: bool = True) -> dict[str, list[str]]:
    """Worst-fit decreasing placement of tasks onto cores by predicted steady temperature.

    Tasks are taken in order of decreasing self-heating (coupling diagonal
    times the task's long-run core power, averaged over cores) and each goes
    to the core with the lowest accumulated predicted temperature among
    those with utilization room. With ``refine``, pairwise swaps between
    cores are then applied while they shrink the max-min temperature gap.
    """
    cores = tuple(floorplan.cores if cores is None else cores)
    nb = len(floorplan.blocks)

    def self_rise(t):
        return np.mean([coupling.coefficients[coupling.index(c), coupling.index(c)]
                        * _average_power(t, floorplan, c)[floorplan.index(c)] for c in cores])

    order = sorted(tasks, key=lambda t: (-self_rise(t), t.name))
    placed = {c: [] for c in cores}
    util = dict.fromkeys(cores, 0.0)
    load = np.zeros(nb)
    for t in order:
        temps = _core_temps(coupling, floorplan, cores, load)
        fits = [i for i, c in enumerate(cores) if util[c] + t.utilization <= 1 + 1e-12]
        i = min(fits or range(len(cores)), key=lambda i: (temps[i], i))
        placed[cores[i]].append(t)
        util[cores[i]] += t.utilization
        load = load + _average_power(t, floorplan, cores[i])

    def gap(p):
        total = sum((_average_power(t, floorplan, c) for c in cores for t in p[c]), np.zeros(nb))
        temps = _core_temps(coupling, floorplan, cores, total)
        return float(temps.max() - temps.min())

    def feasible(ts):
        return sum(t.utilization for t in ts) <= 1 + 1e-12

    while refine:
        best, best_gap = None, gap(placed) - 1e-12
        for a in range(len(cores)):
            for b in range(a + 1, len(cores)):
                ca, cb = cores[a], cores[b]
                for i, ta in enumerate(placed[ca]):
                    for j, tb in enumerate(placed[cb]):
                        trial = dict(placed)
                        trial[ca] = placed[ca][:i] + [tb] + placed[ca][i + 1:]
                        trial[cb] = placed[cb][:j] + [ta] + placed[cb][j + 1:]
                        if feasible(trial[ca]) and feasible(trial[cb]):
                            g = gap(trial)
                            if g < best_gap:
                                best, best_gap = trial, g
        if best is None:
            break
        placed = best
    return {c: [t.name for t in placed[c]] for c in cores}


def rt_tas(tasks, floorplan: Floorplan, coupling: CouplingMatrix, config: SchedulerConfig,
           cores=None, refine: bool = True) -> Schedule:
    """Static WFD partition executed as per-core queues, never forcing a core idle.

    Each core runs its queue in order without preemption: when the current
    task has no pending job, the core moves on to the next queued task that
    has one. A new entry is appended whenever any core switches task.
    """
    cores = tuple(floorplan.cores if cores is None else cores)
    queues = wfd_partition(tasks, floorplan, coupling, cores, refine)
    engine = Replay(tasks, floorplan, cores, config.quantum, config.dt, config.idle_power)
    current = [queues[c][0] if queues[c] else None for c in cores]
    entries = []
    for k in range(config.n_quanta):
        engine.boundary()
        for i, c in enumerate(cores):
            q = queues[c]
            if current[i] is None or engine.pending[current[i]]:
                continue
            start = q.index(current[i])
            for step in range(1, len(q) + 1):
                cand = q[(start + step) % len(q)]
                if engine.pending[cand]:
                    current[i] = cand
                    break
        assignment = tuple(current)
        if not entries or entries[-1][1] != assignment:
            entries.append((k, assignment))
        engine.advance(assignment, power=False)
    engine.boundary()
    return Schedule(config.quantum, config.t_end, cores, entries, "rt-tas",
                    None, None, not engine.misses, engine.misses)


# -- executing schedules -----------------------------------------------------

def replay_schedule(schedule: Schedule, tasks, floorplan: Floorplan, dt: float,
                    idle_power: float = 0.0, power: bool = True):
    """Execute a schedule step by step; returns ``(block power rows, engine)``.

    Rows have shape ``(n_steps, n_blocks)``; row ``k`` holds over
    ``[k dt, (k + 1) dt)``. The returned engine carries the final progress
    and every deadline miss.
    """
    engine = Replay(tasks, floorplan, schedule.cores, schedule.quantum, dt, idle_power)
    known = set(engine.tasks)
    unknown = schedule.task_names() - known
    if unknown:
        raise KeyError(f"schedule references unknown tasks {sorted(unknown)}")
    n = schedule.n_ticks
    rows = np.zeros((n * engine.spq, len(floorplan.blocks))) if power else None
    ticks = [t for t, _ in schedule.entries]
    assignment, e = (None,) * len(schedule.cores), 0
    for k in range(n):
        engine.boundary()
        while e < len(ticks) and ticks[e] == k:
            assignment = schedule.entries[e][1]
            e += 1
        out = engine.advance(assignment, power)
        if power:
            rows[k * engine.spq:(k + 1) * engine.spq] = out
    engine.boundary()
    return rows, engine


def build_power_trace(schedule: Schedule, tasks, floorplan: Floorplan, dt: float,
                      idle_power: float = 0.0) -> BlockPowerTrace:
    """Block power ``P_sigma`` induced by the schedule, sampled every ``dt``."""
    rows, _ = replay_schedule(schedule, tasks, floorplan, dt, idle_power)
    return BlockPowerTrace(np.arange(rows.shape[0]) * dt, rows, floorplan.block_names)


# -- schedule files ----------------------------------------------------------

SCHEDULE_FORMAT = "podtas-schedule 1"


def save_schedule(schedule: Schedule, path) -> Path:
    """Text schedule: ``key value`` header, then ``time_ms,core_id,task`` rows per entry."""
    opt = lambda v: "none" if v is None else repr(float(v))  # noqa: E731
    lines = [
        f"# {SCHEDULE_FORMAT}",
        f"algorithm {schedule.algorithm or 'none'}",
        f"t_cool {opt(schedule.t_cool)}",
        f"t_hot {opt(schedule.t_hot)}",
        f"quantum {schedule.quantum!r}",
        f"t_end {schedule.t_end!r}",
        f"valid {str(schedule.valid).lower()}",
        "cores " + " ".join(schedule.cores),
    ]
    lines += [f"miss {name} {t!r}" for name, t in schedule.misses]
    lines.append("time_ms,core_id,task")
    q_ms = schedule.quantum * 1e3
    for tick, assignment in schedule.entries:
        for core, task in zip(schedule.cores, assignment):
            lines.append(f"{tick * q_ms:.12g},{core},{task or 'IDLE'}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_schedule(path) -> Schedule:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"# {SCHEDULE_FORMAT}":
        raise ValueError(f"{path}: not a {SCHEDULE_FORMAT} file")
    head, misses, i = {}, [], 1
    while i < len(lines) and lines[i] != "time_ms,core_id,task":
        key, _, value = lines[i].partition(" ")
        if key == "miss":
            name, t = value.split()
            misses.append((name, float(t)))
        else:
            head[key] = value
        i += 1
    opt = lambda v: None if v == "none" else float(v)  # noqa: E731
    quantum = float(head["quantum"])
    cores = tuple(head["cores"].split())
    ticks: dict[int, dict[str, str | None]] = {}
    for row in lines[i + 1:]:
        if not row.strip():
            continue
        t, core, task = row.split(",")
        tick = int(round(float(t) * 1e-3 / quantum))
        if core not in cores:
            raise ValueError(f"{path}: unknown core {core!r}")
        ticks.setdefault(tick, {})[core] = None if task == "IDLE" else task
    entries = []
    prev = dict.fromkeys(cores)
    for tick in sorted(ticks):
        prev = {**prev, **ticks[tick]}
        entries.append((tick, tuple(prev[c] for c in cores)))
    algorithm = head.get("algorithm", "none")
    return Schedule(quantum, float(head["t_end"]), cores, entries,
                    "" if algorithm == "none" else algorithm, opt(head["t_cool"]),
                    opt(head["t_hot"]), head["valid"] == "true", misses)
