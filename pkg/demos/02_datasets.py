"""
Datasets: generate a small linear-convection set, write it in the CNO2
format, read it back and look at what was skipped by the CFL check.
"""
import tempfile
from pathlib import Path

import numpy as np

from compno.datagen import DatagenConfig, generate, read_dataset, write_dataset

cfg = DatagenConfig(task="linconv", n_ic=2, nx=16, fine_nx=32, fine_fraction=0.2, dt=0.1, n_steps=5,
                    test_fraction=0.2, seed=0)
ds = generate(cfg)
print(f"{len(ds)} trajectories, resolutions {ds.resolutions()}")
for s in ds.skipped:
    # fast convection on a coarse grid breaks the explicit CFL limit
    if s["reason"] == "cfl":
        print(f"  skipped beta={s['beta']} on {s['nx']}^2: dt {s['dt']} > {s['dt_max']:.3f}")

path = Path(tempfile.mkdtemp()) / "linconv.cno"
write_dataset(ds, path)
back = read_dataset(path)
print(f"wrote {path.stat().st_size} bytes, read back equal: {back == ds}")

# training pairs are increments, derived on the fly
t = back.split("train").trajectories[0]
inc = np.diff(t.data, axis=0)
print(f"first train trajectory: beta={t.params.beta}, mean |increment| {np.abs(inc).mean():.4f}")
