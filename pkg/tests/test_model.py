import numpy as np
import pytest

from compno import autodiff as ad
from compno.datagen import DatagenConfig, generate
from compno.field import Field, Grid, ddx, ddy, lap5
from compno.model import (
    AGGREGATOR_WIDTHS,
    ROUTING,
    Aggregator,
    AggregatorTrainConfig,
    BlockStepper,
    CompNoModel,
    FrozenWeightsModified,
    RoutingError,
    TargetPde,
    aggregate_step,
    benchmark_inference,
    closure_residual_burgers,
    closure_residual_convdiff,
    evaluate,
    foundation_residual,
    load_model,
    physics_residual,
    residual_tensor,
    rollout,
    save_model,
    train_aggregator,
)
from compno.neuralop import FnoBlock, FnoConfig, fno_forward, monolithic_config, save_block
from compno.solvers import PdeParams, Trajectory, step_convdiff_imex

from gradcheck import check

G = Grid(16, 16)


def block(op, seed=0, dtype=np.float64, width=8):
    b = FnoBlock.create(FnoConfig(op, width=width, modes=3, n_layers=2, proj_hidden=8), seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 100)
    b.weights["proj2.w"] = rng.normal(size=b.weights["proj2.w"].shape).astype(dtype) * 0.05
    b._tensors = {}
    return b


def model_for(target, dtype=np.float64, width=10, **kw):
    blocks = [block(op, seed=i, dtype=dtype) for i, op in enumerate(ROUTING[target])]
    return CompNoModel.build(blocks, target, width=width, seed=5, **kw)


def randomize_head(model, scale=0.1, seed=7):
    rng = np.random.default_rng(seed)
    w = model.aggregator.weights
    w["l2.w"] = (rng.normal(size=w["l2.w"].shape) * scale).astype(w["l2.w"].dtype)
    model.aggregator._tensors = {}
    return model


def state_for(target, seed=0):
    ch = TargetPde(target).state_channels
    return np.random.default_rng(seed).normal(size=(ch,) + G.shape) * 0.3


def data(target, **kw):
    base = dict(task=target, nx=16, fine_fraction=0.0, dt=0.1, n_steps=6, n_ic=2, nus=(0.1,),
                betas=(0.2, 0.4), amplitude=0.3, test_fraction=0.3, seed=2)
    base.update(kw)
    return generate(DatagenConfig(**base))


P = PdeParams("convdiff", beta=0.3, nu=0.1, rho=1.0, dt=0.1)


# -- routing and construction -----------------------------------------------------------

def test_routing_accepts_only_declared_compositions():
    with pytest.raises(RoutingError):
        CompNoModel.build([block("diffusion"), block("linconv")], "convdiff")
    with pytest.raises(RoutingError):
        CompNoModel.build([block("linconv"), block("diffusion")], "burgers_scalar")
    with pytest.raises(RoutingError):
        TargetPde("diffusion")
    m = model_for("convdiff")
    assert all(b.frozen for b in m.blocks)


def test_mismatched_widths_rejected():
    a = block("linconv")
    b = FnoBlock.create(FnoConfig("diffusion", width=6, modes=3, n_layers=2, proj_hidden=8))
    with pytest.raises(RoutingError):
        CompNoModel.build([a, b], "convdiff")


@pytest.mark.parametrize("target,n_in,n_out,budget", [
    ("convdiff", 256, 1, 41_000), ("burgers_scalar", 256, 1, 75_000),
    ("burgers_vec", 256, 2, 75_000), ("ins", 640, 1, 140_000),
])
def test_aggregator_budgets(target, n_in, n_out, budget):
    h = AGGREGATOR_WIDTHS[target]
    agg = Aggregator.create(n_in, n_out, h)
    closed = n_in * h + h + h * h + h + h * n_out + n_out
    assert agg.count_params() == closed
    assert abs(closed - budget) / budget < 0.02


def test_count_excludes_frozen_blocks():
    m = model_for("ins")
    assert m.count_params() == m.aggregator.count_params()
    assert m.aggregator.in_channels == 5 * 8  # three embeddings plus two pressure gradients


def test_monolithic_baseline_is_larger_than_aggregators():
    assert FnoConfig("linconv").param_count() > 0
    assert monolithic_config().param_count() > 10 * 41_000


# -- forward ----------------------------------------------------------------------------

@pytest.mark.parametrize("target", ["convdiff", "burgers_scalar", "burgers_vec"])
def test_zero_head_is_identity(target):
    m = model_for(target, block_skip=False)
    x = state_for(target)[None]
    nxt, delta, p = m.step(x, [P], G)
    assert np.array_equal(nxt.value, x) and p is None
    assert not np.any(delta.value)


@pytest.mark.parametrize("target", ["convdiff", "burgers_scalar", "burgers_vec"])
def test_zero_head_with_skip_sums_block_increments(target):
    m = model_for(target)
    assert m.block_skip
    x = state_for(target)[None]
    _, delta, _ = m.step(x, [P], G)
    # oracle: each frozen block called on its own
    ref = sum(fno_forward(b, Field(G, x[0]), P).data for b in m.blocks)
    assert np.allclose(delta.value[0], ref, atol=1e-12)


def test_ins_skip_is_projected_block_sum():
    m = model_for("ins")
    assert m.block_skip
    x = state_for("ins")[None]
    _, delta, _ = m.step(x, [P], G)
    # oracle in numpy: Poisson block on -curl of the summed block increments, then its curl
    w = sum(b.forward(x[:, :2], b.gamma_vector(P)[None], G).value for b in m.blocks[:2])[0]
    src = ddy(w[0], G.dy) - ddx(w[1], G.dx)
    psi = m.blocks[2].forward(src[None, None], None, G).value[0, 0]
    ref = np.stack([ddy(psi, G.dy), -ddx(psi, G.dx)])
    assert np.max(np.abs(ref)) > 1e-6
    assert np.allclose(delta.value[0], ref, atol=1e-12)
    du, dv = delta.value[0]
    assert np.max(np.abs(ddx(du, G.dx) + ddy(dv, G.dy))) < 1e-12
    with pytest.raises(ValueError):
        model_for("ins", head="direct", block_skip=True)


def test_ins_step_carries_block_pressure():
    m = model_for("ins", block_skip=False)
    x = state_for("ins")[None]
    nxt, delta, p = m.step(x, [P], G)
    assert np.array_equal(nxt.value[:, :2], x[:, :2])
    assert np.array_equal(nxt.value[:, 2:], p.value)
    # pressure is the Poisson block applied to the source of the block-predicted velocity
    vel = x[:, :2]
    for b in m.blocks[:2]:
        vel = vel + b.forward(x[:, :2], b.gamma_vector(P)[None], G).value
    u, v = vel[0, 0], vel[0, 1]
    src = (P.rho / P.dt) * (ddx(u, G.dx) + ddy(v, G.dy))
    ref = m.blocks[2].forward(src[None, None], None, G).value
    assert np.allclose(p.value, ref, atol=1e-12)


def test_ins_stream_head_is_divergence_free():
    m = randomize_head(model_for("ins"), scale=1.0)
    _, delta, _ = m.step(state_for("ins")[None], [P], G)
    du, dv = delta.value[0]
    assert np.max(np.abs(delta.value)) > 1e-3
    assert np.max(np.abs(ddx(du, G.dx) + ddy(dv, G.dy))) < 1e-12


def test_include_state_adds_channels():
    m = model_for("burgers_vec", include_state=True)
    assert m.aggregator.in_channels == 2 * 8 + 2
    m.step(state_for("burgers_vec")[None], [P], G)


def test_wrong_state_channels_rejected():
    m = model_for("burgers_vec")
    with pytest.raises(ValueError):
        m.step(state_for("convdiff")[None], [P], G)


def test_aggregate_step_field_api_matches_batch():
    m = randomize_head(model_for("convdiff"))
    s = state_for("convdiff")
    delta, p = aggregate_step(m, Field(G, s), P)
    _, ref, _ = m.step(s[None], [P], G)
    assert p is None and np.allclose(delta.data, ref.value[0])


def test_batch_rows_are_independent():
    m = randomize_head(model_for("convdiff"))
    a, b = state_for("convdiff", 0), state_for("convdiff", 1)
    q = PdeParams("convdiff", beta=0.1, nu=0.05, dt=0.1)
    both = m.step(np.stack([a, b]), [P, q], G)[1].value
    assert np.allclose(both[0], m.step(a[None], [P], G)[1].value[0])
    assert np.allclose(both[1], m.step(b[None], [q], G)[1].value[0])


# -- physics residual ---------------------------------------------------------------------

def euler_central(u0, params, n, variant):
    """Independent oracle trajectory: explicit Euler with the residual's own stencils."""
    out = [u0]
    u = u0
    for _ in range(n):
        lap = lap5(u, G.dx, G.dy)
        if variant == "convdiff":
            rhs = -params.beta * (ddx(u, G.dx) + ddy(u, G.dy)) + params.nu * lap
        elif u.shape[0] == 1:
            rhs = -u * (ddx(u, G.dx) + ddy(u, G.dy)) + params.nu * lap
        else:
            rhs = np.stack([-(u[0] * ddx(u[c], G.dx) + u[1] * ddy(u[c], G.dy)) for c in range(2)]) + params.nu * lap
        u = u + params.dt * rhs
        out.append(u)
    return np.stack(out)


@pytest.mark.parametrize("variant,ch", [("convdiff", 1), ("burgers_scalar", 1), ("burgers_vec", 2)])
def test_residual_vanishes_on_matching_discretisation(variant, ch):
    p = PdeParams(variant, beta=0.7, nu=0.05, dt=0.01)
    u0 = np.random.default_rng(1).normal(size=(ch,) + G.shape) * 0.5
    traj = Trajectory(G, euler_central(u0, p, 4, variant), p)
    assert physics_residual(traj, variant) < 1e-12
    # and it is O(1) for a perturbed trajectory
    bad = traj.data.copy()
    bad[2] += 0.01
    assert physics_residual(Trajectory(G, bad, p), variant) > 0.1


def test_residual_zero_field_and_constant_state():
    for variant, ch in [("burgers_scalar", 1), ("burgers_vec", 2), ("ins", 3), ("convdiff", 1)]:
        p = PdeParams(variant, beta=1.0, nu=0.1, dt=0.1)
        zero = np.zeros((3, ch) + G.shape)
        assert physics_residual(Trajectory(G, zero, p), variant) == 0.0
        const = np.full((3, ch) + G.shape, 0.7)
        assert physics_residual(Trajectory(G, const, p), variant) < 1e-14


def test_ins_residual_pressure_and_divergence_terms():
    p = PdeParams("ins", nu=0.1, rho=2.0, dt=0.1)
    X, Y = G.coords()
    frames = np.zeros((2, 3) + G.shape)
    frames[1, 2] = np.sin(X)
    expect = np.mean(np.abs(ddx(np.sin(X), G.dx))) / p.rho / 2  # only u-channel, averaged over 2
    assert np.isclose(physics_residual(Trajectory(G, frames, p), "ins"), expect)
    frames = np.zeros((2, 3) + G.shape)
    frames[1, 0] = np.sin(X)
    div = np.mean(np.abs(ddx(np.sin(X), G.dx)))
    tend = np.mean(np.abs(np.sin(X) / p.dt)) / 2
    assert np.isclose(physics_residual(Trajectory(G, frames, p), "ins"), tend + div)


def solver_residual(beta, nu, nx, dt, horizon=0.08):
    ds = generate(DatagenConfig(task="convdiff", betas=(beta,), nus=(nu,), nx=nx, fine_fraction=0.0,
                                n_ic=1, dt=dt, n_steps=int(round(horizon / dt)), seed=1))
    return physics_residual(ds.trajectories[0], "convdiff")


def test_solver_residual_is_first_order_in_time():
    # diffusion only: CN against the forward-difference residual, O(dt)
    r = [solver_residual(0.0, 0.05, 32, dt) for dt in (0.02, 0.01, 0.005)]
    assert 1.6 < r[0] / r[1] < 2.4 and 1.6 < r[1] / r[2] < 2.4


def test_solver_residual_is_first_order_in_space():
    # upwind convection against the central residual, O(dx)
    r = [solver_residual(0.5, 0.0, nx, 0.002, horizon=0.02) for nx in (32, 64)]
    assert 1.5 < r[0] / r[1] < 2.5


def test_residual_rejects_nonfinite():
    p = PdeParams("burgers_scalar", nu=0.1, dt=0.1)
    a = np.zeros((2, 1) + G.shape)
    a[1, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        physics_residual(Trajectory(G, a, p), "burgers_scalar")


def test_residual_gradient_through_rollout_window():
    m = randomize_head(model_for("burgers_vec", width=4), scale=0.05)
    G8 = Grid(8, 8)
    x0 = np.random.default_rng(0).normal(size=(1, 2) + G8.shape) * 0.3
    p = PdeParams("burgers_vec", nu=0.1, dt=0.05)
    names = ["l0.w", "l2.w"]
    base = dict(m.aggregator.weights)

    def build(ts):
        w = {k: ad.Tensor(v) for k, v in base.items()} | dict(zip(names, ts))
        frames = [ad.Tensor(x0)]
        s = frames[0]
        for _ in range(2):
            s, _, _ = m.step(s, [p], G8, weights=w)
            frames.append(s)
        return residual_tensor(frames, [p], m.target, G8)

    errs = check(build, [base[n].copy() for n in names], h=1e-6)
    assert max(errs) < 1e-5


# -- closure terms ------------------------------------------------------------------------

def test_closure_burgers_expands_the_quadratic():
    rng = np.random.default_rng(3)
    for ch in (1, 2):
        u, v = rng.normal(size=(2, ch) + G.shape)
        p = PdeParams("burgers_vec", nu=0.07, dt=0.1)
        a1, a2 = 0.6, 0.4
        w = a1 * u + a2 * v
        if ch == 1:
            nl = w * (ddx(w, G.dx) + ddy(w, G.dy))
        else:
            nl = np.stack([w[0] * ddx(w[c], G.dx) + w[1] * ddy(w[c], G.dy) for c in range(2)])
        got = closure_residual_burgers(Field(G, u), Field(G, v), a1, a2, p).data
        assert np.allclose(got + a1 * p.nu * lap5(u, G.dx, G.dy), nl, atol=1e-12)


def test_closure_convdiff_terms():
    X, Y = G.coords()
    u, v = Field(G, np.sin(X)), Field(G, np.cos(Y))
    got = closure_residual_convdiff(u, v, 0.5, 2.0, P).data[0]
    ref = 2.0 * P.beta * ddy(np.cos(Y), G.dy) - 0.5 * P.nu * lap5(np.sin(X), G.dx, G.dy)
    assert np.allclose(got, ref)
    assert not np.any(closure_residual_convdiff(u, v, 0.0, 0.0, P).data)


def test_closure_shape_errors():
    with pytest.raises(ValueError):
        closure_residual_convdiff(Field(G, np.zeros(G.shape)), Field(Grid(8, 8), np.zeros((8, 8))), 1, 1, P)
    with pytest.raises(ValueError):
        closure_residual_convdiff(Field(G, np.zeros((2,) + G.shape)), Field(G, np.zeros((2,) + G.shape)), 1, 1, P)


def test_foundation_residual_reports_each_block():
    m = model_for("ins")
    out = foundation_residual(m, Field(G, state_for("ins")), PdeParams("ins", nu=0.1, dt=0.05))
    assert set(out) == set(ROUTING["ins"])
    assert all(np.isfinite(v) and v >= 0 for v in out.values())


# -- training -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def convdiff_ds():
    return data("convdiff")


def test_training_fits_and_keeps_blocks_frozen(convdiff_ds):
    m = model_for("convdiff", lambda_physics=0.0)
    hashes = m.block_hashes()
    res = train_aggregator(m, convdiff_ds, AggregatorTrainConfig(epochs=20, batch_size=8, lr=1e-2))
    assert m.block_hashes() == hashes
    c = res.curves["L_data"]
    assert len(c) == 20 and len(res.curves["R"]) == 20
    zero = np.mean([np.abs(np.diff(t.data, axis=0)).mean() for t in convdiff_ds.split("train")])
    assert c[-1] < 0.7 * zero


def test_zero_physics_weight_is_data_only_and_deterministic(convdiff_ds):
    cfg = AggregatorTrainConfig(epochs=3, batch_size=8)
    runs = [train_aggregator(model_for("convdiff", lambda_physics=0.0), convdiff_ds, cfg) for _ in range(2)]
    assert runs[0].curves == runs[1].curves
    assert np.allclose(runs[0].curves["loss"], runs[0].curves["L_data"])
    w0, w1 = (r.model.aggregator.weights for r in runs)
    assert all(np.array_equal(w0[k], w1[k]) for k in w0)


def test_physics_term_changes_training(convdiff_ds):
    cfg = AggregatorTrainConfig(epochs=3, batch_size=8, physics_window=2)
    a = train_aggregator(model_for("convdiff", lambda_physics=0.0), convdiff_ds, cfg)
    b = train_aggregator(model_for("convdiff", lambda_physics=1.0), convdiff_ds, cfg)
    assert a.curves["L_data"] != b.curves["L_data"]


def test_modified_foundation_weights_raise(convdiff_ds):
    m = model_for("convdiff")

    def tamper(epoch, _):
        m.blocks[0].weights["lift.b"] = m.blocks[0].weights["lift.b"] + 1e-3

    with pytest.raises(FrozenWeightsModified):
        train_aggregator(m, convdiff_ds, AggregatorTrainConfig(epochs=1, batch_size=8), progress=tamper)


def test_training_rejects_wrong_task(convdiff_ds):
    with pytest.raises(ValueError):
        train_aggregator(model_for("burgers_scalar"), convdiff_ds, AggregatorTrainConfig(epochs=1))


def test_ins_training_runs():
    ds = data("ins", amplitude=0.5, dt=0.05, n_steps=4)
    m = model_for("ins")
    res = train_aggregator(m, ds, AggregatorTrainConfig(epochs=2, batch_size=4, physics_window=1))
    assert all(np.isfinite(res.curves["R"]))
    ev = evaluate(m, ds, 2, 2)
    assert len(ev["pressure_mae"]) == 2
    assert max(ev["divergence"]) < 1e-5


# -- rollout and evaluation ----------------------------------------------------------------

def test_rollout_keeps_warmup_and_measures_error(convdiff_ds):
    m = randomize_head(model_for("convdiff"))
    t = convdiff_ds.trajectories[0]
    res = rollout(m, t.data[:2], t.params, 3, t.grid, truth=t.data)
    assert res.trajectory.data.shape == (5,) + t.data.shape[1:]
    assert np.array_equal(res.trajectory.data[:2], t.data[:2].astype(float))
    assert len(res.step_mae) == 3 and res.failed_step is None
    assert np.isclose(res.step_mae[0], np.mean(np.abs(res.trajectory.data[2] - t.data[2])))


def test_rollout_truncates_on_nonfinite():
    m = model_for("convdiff")
    m.aggregator.weights["l2.b"][:] = np.inf
    res = rollout(m, state_for("convdiff")[None], P, 5, G)
    assert res.failed_step == 1 and res.trajectory.n_time == 1


def test_block_stepper_rolls_out_monolithic(convdiff_ds):
    b = FnoBlock.create(monolithic_config(width=4, modes=3, n_layers=1, proj_hidden=8))
    ev = evaluate(BlockStepper(b), convdiff_ds, 2, 3, target=TargetPde("convdiff"))
    assert len(ev["step_mae"]) == 3 and np.isfinite(ev["physics_residual"])


def test_evaluate_requires_long_enough_trajectories(convdiff_ds):
    with pytest.raises(ValueError):
        evaluate(model_for("convdiff"), convdiff_ds, 5, 10)


def test_benchmark_reports_timings():
    m = model_for("convdiff", dtype=np.float32)
    out = benchmark_inference(m, step_convdiff_imex, G, P, n_steps=2)
    assert out["t_model"] > 0 and out["t_solver"] > 0
    assert np.isclose(out["speedup"], out["t_solver"] / out["t_model"])


# -- bundle ------------------------------------------------------------------------------

def test_bundle_round_trip(tmp_path):
    m = randomize_head(model_for("ins"))
    save_model(m, tmp_path / "m")
    back = load_model(tmp_path / "m")
    x = state_for("ins")[None]
    assert np.array_equal(back.step(x, [P], G)[0].value, m.step(x, [P], G)[0].value)
    assert all(b.frozen for b in back.blocks)
    assert back.target == m.target and back.lambda_physics == m.lambda_physics


def test_bundle_detects_swapped_block(tmp_path):
    m = model_for("convdiff")
    d = save_model(m, tmp_path / "m")
    other = block("linconv", seed=9)
    save_block(other.freeze(), d / "block0_linconv.cnow")
    with pytest.raises(FrozenWeightsModified):
        load_model(d)


def test_zero_horizon_and_zero_aggregator_rollouts(convdiff_ds):
    m = model_for("convdiff", block_skip=False)
    t = convdiff_ds.trajectories[0]
    assert np.array_equal(rollout(m, t.data[:3], t.params, 0, t.grid).trajectory.data, t.data[:3])
    frames = rollout(m, t.data[:2], t.params, 4, t.grid).trajectory.data
    assert all(np.array_equal(f, t.data[1]) for f in frames[2:])


def test_closure_burgers_opposite_weights_leave_only_viscous_term():
    u = np.random.default_rng(4).normal(size=(2,) + G.shape)
    p = PdeParams("burgers_vec", nu=0.2, dt=0.1)
    got = closure_residual_burgers(Field(G, u), Field(G, u), 1.0, -1.0, p).data
    assert np.allclose(got, -p.nu * lap5(u, G.dx, G.dy), atol=1e-12)


def test_noise_has_larger_residual_than_solver():
    ds = generate(DatagenConfig(task="convdiff", betas=(0.5,), nus=(0.05,), nx=32, fine_fraction=0.0,
                                n_ic=1, dt=0.01, n_steps=5, seed=1))
    t = ds.trajectories[0]
    noise = np.random.default_rng(0).normal(size=t.data.shape) * t.data.std()
    assert physics_residual(Trajectory(t.grid, noise, t.params), "convdiff") > physics_residual(t, "convdiff")


def test_model_timing_does_not_depend_on_values():
    blocks = [block(op, seed=i, dtype=np.float32, width=32) for i, op in enumerate(ROUTING["convdiff"])]
    m = CompNoModel.build(blocks, "convdiff", width=64)
    g = Grid(64, 64)
    rng = np.random.default_rng(0)
    a, b = (benchmark_inference(m, step_convdiff_imex, g, P, n_steps=9, state=rng.normal(size=(1, 64, 64)) * s)
            for s in (0.1, 3.0))
    assert abs(a["t_model"] - b["t_model"]) <= 0.2 * max(a["t_model"], b["t_model"])
