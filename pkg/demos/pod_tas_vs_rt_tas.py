"""Build POD-TAS and RT-TAS schedules for the 4-task set and evaluate both.

The oracle runs at 100 us here to keep the demo short; pass ``--fine`` for
the 10 us evaluation step used by the acceptance suite.
"""

import sys

import numpy as np

from podtas.evaluation import compare_reports, evaluate_schedule, metrics, METRIC_LABELS
from podtas.oracle import default_setup
from podtas.pipeline import build_model, training_snapshots
from podtas.scheduler import SchedulerConfig, pod_tas, rt_tas
from podtas.steady import calibrate
from podtas.tasks import default_task_set


def main(dt):
    setup = default_setup()
    fp = setup.floorplan
    tasks = default_task_set(4)
    model = build_model(training_snapshots(setup, np.random.default_rng(0), tasks), setup, 30)
    coupling = calibrate(setup)
    config = SchedulerConfig(t_cool=70.0, t_hot=75.0)

    pod = pod_tas(tasks, config, model, fp)
    rt = rt_tas(tasks, fp, coupling, config)
    print(f"POD-TAS: {len(pod.schedule.entries)} decisions, predicted peak "
          f"{pod.core_temperatures.max():.2f} C, valid={pod.schedule.valid}")
    print(f"RT-TAS:  {len(rt.entries)} decisions, queues {dict(zip(rt.cores, rt.entries[0][1]))}")

    a = metrics(evaluate_schedule(pod.schedule, tasks, setup, dt))
    b = metrics(evaluate_schedule(rt, tasks, setup, dt))
    diff = compare_reports(a, b)
    print(f"{'metric':>11}  {'POD-TAS':>9}  {'RT-TAS':>9}  {'diff %':>8}")
    for key, label in METRIC_LABELS.items():
        print(f"{label:>11}  {getattr(a, key):9.3f}  {getattr(b, key):9.3f}  {diff[key]:8.2f}")


if __name__ == "__main__":
    main(1e-5 if "--fine" in sys.argv else 1e-4)
