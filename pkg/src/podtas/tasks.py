"""Task files and the synthetic benchmark task sets.

Task file format (UTF-8 text, ``#`` comments)::

    task heat2d
    wcet_ms 147
    deadline_ms 250
    period_ms 250
    time_ms core northbridge
    0 14.2 0.5
    4 13.1 0.5
    end

The trace table holds piecewise-constant power samples (W). The ``core``
column lands on whichever core executes the task; any other column names a
fixed floorplan block.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .domain import Task

__all__ = ["parse_tasks", "load_tasks", "format_tasks", "save_tasks", "BENCHMARKS",
           "synthetic_task_set", "default_task_set"]

MS = 1e-3

# name, WCET (ms) from the benchmark table, mean core power (W), relative fluctuation
BENCHMARKS = (
    ("heat2d", 147, 14.0, 0.10),
    ("radix_sort", 85, 11.0, 0.20),
    ("advection_diffusion", 41, 12.0, 0.15),
    ("monte_carlo", 32, 10.0, 0.20),
    ("fftw", 150, 13.0, 0.15),
    ("ks_pde", 84, 12.0, 0.10),
    ("loops", 39, 9.0, 0.05),
    ("lid_driven_cavity", 78, 12.5, 0.15),
)
DEFAULT_PERIOD_MS = 250
NORTHBRIDGE_W = 0.5


def _num(text: str) -> float:
    value = float(text)
    if not np.isfinite(value):
        raise ValueError(f"non-finite number {text!r}")
    return value


def parse_tasks(text: str) -> list[Task]:
    tasks, cur = [], None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if cur is None:
                if parts[0] != "task" or len(parts) != 2:
                    raise ValueError("expected 'task <name>'")
                cur = {"name": parts[1], "rows": []}
            elif parts[0] == "end":
                if "columns" not in cur:
                    raise ValueError("missing power-trace table")
                rows = np.array(cur["rows"], dtype=float).reshape(-1, len(cur["columns"]) + 1)
                tasks.append(Task(cur["name"], cur["wcet_ms"] * MS, cur["deadline_ms"] * MS,
                                  cur["period_ms"] * MS, rows[:, 0] * MS, rows[:, 1:],
                                  tuple(cur["columns"])))
                cur = None
            elif parts[0] in ("wcet_ms", "deadline_ms", "period_ms"):
                cur[parts[0]] = _num(parts[1])
            elif parts[0] == "time_ms":
                cur["columns"] = parts[1:]
                if not cur["columns"]:
                    raise ValueError("trace table needs at least one power column")
            elif "columns" in cur:
                if len(parts) != len(cur["columns"]) + 1:
                    raise ValueError(f"expected {len(cur['columns']) + 1} values")
                cur["rows"].append([_num(p) for p in parts])
            else:
                raise ValueError(f"unexpected line {line!r}")
        except (ValueError, KeyError, IndexError) as exc:
            raise ValueError(f"task file line {lineno}: {exc}") from exc
    if cur is not None:
        raise ValueError(f"task {cur['name']!r} is missing 'end'")
    names = [t.name for t in tasks]
    if len(names) != len(set(names)):
        raise ValueError("duplicate task names")
    return tasks


def load_tasks(path) -> list[Task]:
    return parse_tasks(Path(path).read_text(encoding="utf-8"))


def format_tasks(tasks) -> str:
    out = []
    for t in tasks:
        out += [f"task {t.name}", f"wcet_ms {t.wcet / MS!r}", f"deadline_ms {t.deadline / MS!r}",
                f"period_ms {t.period / MS!r}", "time_ms " + " ".join(t.trace_columns)]
        for time, row in zip(t.trace_times, t.trace_powers):
            out.append(" ".join(repr(float(v)) for v in (time / MS, *row)))
        out.append("end")
    return "\n".join(out) + "\n"


def save_tasks(tasks, path) -> Path:
    path = Path(path)
    path.write_text(format_tasks(tasks), encoding="utf-8")
    return path


def synthetic_task_set(n_tasks: int = 4, seed: int = 0, period_ms: int = DEFAULT_PERIOD_MS,
                       power_scale: float = 1.0, segment_ms=(2, 8)) -> list[Task]:
    """Benchmark-like tasks with fluctuating core power and a small northbridge load.

    Trace samples sit on a whole-millisecond grid; each segment lasts a random
    number of milliseconds and draws its level uniformly within the task's
    fluctuation band around the mean power.
    """
    if not 1 <= n_tasks <= len(BENCHMARKS):
        raise ValueError(f"n_tasks must be in 1..{len(BENCHMARKS)}")
    rng = np.random.default_rng(seed)
    tasks = []
    for name, wcet, power, spread in BENCHMARKS[:n_tasks]:
        starts, t = [], 0
        while t < wcet:
            starts.append(t)
            t += int(rng.integers(segment_ms[0], segment_ms[1] + 1))
        core = power_scale * power * (1 + spread * rng.uniform(-1, 1, len(starts)))
        nb = np.full(len(starts), NORTHBRIDGE_W)
        tasks.append(Task(name, wcet * MS, period_ms * MS, period_ms * MS,
                          np.array(starts, float) * MS, np.column_stack([core, nb]),
                          ("core", "northbridge")))
    return tasks


def default_task_set(n_tasks: int = 4) -> list[Task]:
    return synthetic_task_set(n_tasks, seed=0)
