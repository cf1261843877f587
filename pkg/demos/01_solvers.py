"""
Classical ground truth: Taylor-Green decay under the projection solver, the
Poisson round trip, and a convection-diffusion trajectory.

Run with ``python demos/01_solvers.py``; it takes a few seconds.
"""
import numpy as np

from compno.field import Field, Grid, divergence, laplacian
from compno.solvers import (
    PdeParams,
    cfl_dt,
    ic_isotropic,
    ic_taylor_green,
    integrate,
    solve_poisson,
    step_ins_projection,
)

grid = Grid(64, 64)

# Taylor-Green: the exact solution decays like exp(-2 nu t)
nu = 0.01
u, v, p = ic_taylor_green(grid, 1.0)
dt = 0.4 * cfl_dt("ins", np.concatenate([u.data, v.data]), grid)
n = int(np.ceil(1.0 / dt))
params = PdeParams("ins", nu=nu, dt=1.0 / n)
for _ in range(n):
    u, v, p = step_ins_projection(u, v, p, params)
ua, va, _ = ic_taylor_green(grid, np.exp(-2 * nu))
err = np.sqrt(np.sum((u.data - ua.data) ** 2 + (v.data - va.data) ** 2) / np.sum(ua.data**2 + va.data**2))
print(f"Taylor-Green at t=1 after {n} steps: rel_l2 {err:.2e}, "
      f"max |div u| {np.abs(divergence(u, v).data).max():.1e}")

# Poisson: the 5-point Laplacian of the solution gives back the zero-mean source
f = Field(grid, np.random.default_rng(0).normal(size=(1, 64, 64)))
back = laplacian(solve_poisson(f)).data
print(f"Poisson round trip error {np.abs(back - (f.data - f.data.mean())).max():.1e}")

# A convection-diffusion trajectory from a random isotropic field
params = PdeParams("convdiff", beta=1.0, nu=0.01, dt=0.01)
traj = integrate(ic_isotropic(grid, seed=3), params, 50)
print(f"convdiff: {traj.n_time} frames, Peclet {params.peclet(grid.lx):.0f}, "
      f"rms {traj.data[0].std():.3f} -> {traj.data[-1].std():.3f}")
