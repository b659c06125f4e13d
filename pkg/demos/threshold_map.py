"""Assignment frequency of POD-TAS over a grid of (T_C, T_H) thresholds."""

import numpy as np

from podtas.evaluation import threshold_sweep
from podtas.oracle import default_setup
from podtas.pipeline import build_model, training_snapshots
from podtas.scheduler import SchedulerConfig
from podtas.tasks import default_task_set


def main():
    setup = default_setup()
    tasks = default_task_set(4)
    model = build_model(training_snapshots(setup, np.random.default_rng(0), tasks), setup, 30)
    grid = [50.0, 55.0, 60.0, 65.0, 70.0, 75.0, 80.0]
    hot = [55.0, 60.0, 65.0, 70.0, 75.0, 80.0, 85.0]
    points = threshold_sweep(tasks, grid, hot, SchedulerConfig(), model, setup.floorplan)
    cell = {(p.t_cool, p.t_hot): p for p in points}
    print("decisions per second (x = deadline miss, . = T_C >= T_H)")
    print("T_H \\ T_C " + "".join(f"{c:>8.0f}" for c in grid))
    for h in hot:
        row = []
        for c in grid:
            p = cell[(c, h)]
            row.append("       ." if not p.valid else
                       "       x" if not p.feasible else f"{p.frequency:8.1f}")
        print(f"{h:>9.0f} " + "".join(row))


if __name__ == "__main__":
    main()
