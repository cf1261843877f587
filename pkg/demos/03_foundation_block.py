"""
A foundation block: pretrain a small parametric FNO on diffusion increments,
then look at its embedding and at how it transfers to a finer grid.

This uses a narrow block (width 32) so that it runs in about a minute.
"""
import numpy as np

from compno.datagen import DatagenConfig, generate
from compno.field import Field, Grid
from compno.neuralop import FnoBlock, FnoConfig, PretrainConfig, embed, fno_forward, pretrain
from compno.solvers import PdeParams, ic_isotropic, step_diffusion_cn

data = generate(DatagenConfig(task="diffusion", nus=(0.1, 0.01), n_ic=6, nx=32, fine_fraction=0.0,
                              dt=0.05, n_steps=5, seed=1))
block = FnoBlock.create(FnoConfig("diffusion", width=32, modes=8, n_layers=3, proj_hidden=32), seed=0,
                        dtype=np.float32)
res = pretrain(block, data, PretrainConfig(epochs=30, lr=3e-3, batch_size=8),
               progress=lambda e, mae: print(f"epoch {e:2d}  train MAE {mae:.2e}") if e % 5 == 0 else None)
block = res.block

# compare against the classical step on a fresh state
p = PdeParams("diffusion", nu=0.1, dt=0.05)
for n in (32, 64):
    g = Grid(n, n)
    u = ic_isotropic(g, seed=99)
    ref = step_diffusion_cn(u, p).data - u.data
    pred = fno_forward(block, u, p).data
    print(f"{n}x{n}: increment MAE {np.abs(pred - ref).mean():.2e} (|increment| {np.abs(ref).mean():.2e})")

eps = embed(block, Field(Grid(32, 32), ic_isotropic(Grid(32, 32), seed=5).data), p)
print(f"embedding shape {eps.shape}, channel std range {eps.std(axis=(1, 2)).min():.2f}"
      f"..{eps.std(axis=(1, 2)).max():.2f}")
