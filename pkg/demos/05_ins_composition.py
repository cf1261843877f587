"""
Incompressible flow from three frozen blocks (nonlinear convection,
diffusion, Poisson).  The aggregator outputs a stream function, so every
predicted velocity increment is divergence-free; pressure comes from the
Poisson block.  Reduced widths keep this to a few minutes.
"""
import numpy as np

from compno.datagen import DatagenConfig, generate
from compno.model import AggregatorTrainConfig, CompNoModel, evaluate, train_aggregator
from compno.neuralop import FnoBlock, FnoConfig, PretrainConfig, pretrain

shape = dict(width=24, modes=8, n_layers=3, proj_hidden=24)
base = dict(nx=32, fine_fraction=0.0, dt=0.02, seed=7, amplitude=0.5)


def foundation(op, task, **kw):
    ds = generate(DatagenConfig(task=task, **base, **kw))
    block = FnoBlock.create(FnoConfig(op, **shape), seed=0, dtype=np.float32)
    res = pretrain(block, ds, PretrainConfig(epochs=20, lr=3e-3, batch_size=8))
    print(f"{op}: final train MAE {res.curve[-1]:.2e}")
    return res.block


blocks = [
    # the INS solver convects with central differences; train the convection block on the same scheme
    foundation("nlconv_vec", "nlconv_vec", n_ic=8, n_steps=5, convection="central"),
    foundation("diffusion_vec", "diffusion_vec", nus=(0.01, 0.001), n_ic=4, n_steps=5),
    foundation("poisson", "poisson", n_ic=40),
]
flow = generate(DatagenConfig(task="ins", nus=(0.01,), n_ic=4, n_steps=30, test_fraction=0.25, **base))
model = CompNoModel.build(blocks, "ins", width=48)
train_aggregator(model, flow, AggregatorTrainConfig(epochs=10, lr=2e-3, physics_window=1, physics_every=4))

ev = evaluate(model, flow, 10, 20)
test = [t for t in flow.trajectories if t.split == "test"]
persist = [np.mean([np.abs(t.data[s, :2] - t.data[9, :2]).mean() for t in test]) for s in range(10, 30)]
print("persistence MAE every 5 steps:", np.round(persist[::5], 4))
print("velocity MAE every 5 steps:", np.round(ev["step_mae"][::5], 4))
print("pressure MAE every 5 steps:", np.round(ev["pressure_mae"][::5], 4))
print(f"max mean |div u| predicted {max(ev['divergence']):.1e}, ground truth {max(ev['gt_divergence']):.1e}")
