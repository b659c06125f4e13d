"""Train the reduced model and compare it with the oracle on a held-out trace.

Run with ``python demos/rom_vs_oracle.py``; takes under a minute.
"""

import numpy as np

from podtas.oracle import default_setup, run_transient
from podtas.pipeline import build_model, training_snapshots
from podtas.pod import integrate, lse, reconstruct, training_traces
from podtas.tasks import default_task_set


def main():
    setup = default_setup()
    fp = setup.floorplan
    snaps = training_snapshots(setup, np.random.default_rng(0), default_task_set(4))
    print(f"{len(snaps)} training snapshots on a {setup.grid.nx}x{setup.grid.ny}x{setup.grid.nz} grid")

    blocks = list(fp.cores) + ["northbridge"]
    trace = training_traces(fp, np.random.default_rng(1000), 1, 1.0, blocks=blocks)[0]
    truth = run_transient(setup, trace, 1.0, 1e-4, snapshot_stride=10)
    z = setup.grid.active_layer

    print(" modes  mean LSE %  max-temp error C")
    for m in (3, 10, 30):
        model = build_model(snaps, setup, m)
        a0 = model.ops.equilibrium(np.zeros(len(fp.blocks)))
        coeffs = integrate(model.ops, a0, trace, 1e-4, 1.0).coefficients[::10]
        fields = [reconstruct(model.basis, a) for a in coeffs]
        err = np.mean([lse(f, truth[k]) for k, f in enumerate(fields)])
        dmax = max(abs(f.values[z].max() - truth.fields[k, z].max()) for k, f in enumerate(fields))
        print(f"{m:6d}  {err:9.4f}  {dmax:16.4f}")


if __name__ == "__main__":
    main()
